"""Dataset format, synthetic scenes, augmentation and image I/O."""
