"""Teacher-student training machinery for a toy LiDAR 3D box detector."""
