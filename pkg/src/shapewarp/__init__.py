"""Shape-guided clothing warping for virtual try-on."""
