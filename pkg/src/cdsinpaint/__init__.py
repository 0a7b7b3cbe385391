"""Occlusion-aware radiance-field inpainting with collaborative score distillation."""
