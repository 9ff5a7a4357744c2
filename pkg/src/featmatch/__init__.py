"""Local-feature matching: SIFT and ORB, brute-force matching, RANSAC homographies
and inlier-ratio evaluation over overlapping tile grids."""

__version__ = "0.1.0"
