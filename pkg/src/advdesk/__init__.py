"""advdesk: desk-scale benchmark of adaptive attacks against DNN defenses."""

__version__ = "0.1.0"
