"""HTTP service wrapping the training and evaluation runners."""

from .app import app, create_app

__all__ = ["app", "create_app"]
