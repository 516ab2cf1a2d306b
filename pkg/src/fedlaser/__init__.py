"""Federated lifetime prediction for semiconductor lasers."""
