# Utility helpers for the qdiff runtime
