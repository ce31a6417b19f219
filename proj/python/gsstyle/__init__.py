"""Appearance-only style transfer for 3D Gaussian scenes."""

from ._gsstyle import (
    CameraView,
    ChecksumError,
    DivergenceError,
    Error,
    FormatError,
    InvalidArgument,
    IoError,
    RenderOptions,
    Scene,
    ShapeError,
    TimeoutError,
    color_transfer,
    compute_edges,
    default_config,
    evaluate,
    load_dataset,
    load_ply,
    read_image,
    render,
    run_cli,
    save_ply,
    serve_jobs,
    stylize,
    write_image,
)

__all__ = [
    "CameraView",
    "ChecksumError",
    "DivergenceError",
    "Error",
    "FormatError",
    "InvalidArgument",
    "IoError",
    "RenderOptions",
    "Scene",
    "ShapeError",
    "TimeoutError",
    "color_transfer",
    "compute_edges",
    "default_config",
    "evaluate",
    "load_dataset",
    "load_ply",
    "read_image",
    "render",
    "run_cli",
    "save_ply",
    "serve_jobs",
    "stylize",
    "write_image",
]
