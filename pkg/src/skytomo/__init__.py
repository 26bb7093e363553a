"""Multi-view cloud tomography."""
