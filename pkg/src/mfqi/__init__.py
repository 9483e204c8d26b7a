"""Power-of-L-choices queue simulation and mean-field rate inference."""
