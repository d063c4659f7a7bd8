# Report tables and sample images
