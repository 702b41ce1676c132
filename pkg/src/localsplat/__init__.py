"""Feed-forward multi-view reconstruction into 3D Gaussian splats.

Posed input views are tokenized per patch, mixed by pose-conditioned
attention over a small neighborhood of views, and decoded into one
Gaussian per input pixel with spherical-harmonics color and opacity,
ready for differentiable alpha-composited rendering.

Submodules are imported lazily. Keeping this module free of heavy
imports lets the command line pin thread-count environment variables
before numpy ever loads.
"""

__version__ = "0.1.0"

# name -> submodule that defines it
_EXPORTS = {
    "ModelConfig": "model", "init_params": "model", "forward": "model",
    "save_checkpoint": "model", "load_checkpoint": "model",
    "GaussianSplatSet": "decoder", "SplatLayout": "decoder",
    "Camera": "geometry", "CameraIntrinsics": "geometry",
    "RigidPose": "geometry", "build_neighbor_graph": "geometry",
    "local_ray_map": "geometry",
    "render": "renderer", "RenderTarget": "renderer",
    "export_ply": "plyio", "import_ply": "plyio",
    "generate_synthetic_scene": "scenes", "load_scene": "scenes",
    "save_scene": "scenes", "make_batch": "scenes", "split_views": "scenes",
    "LossConfig": "training", "ScheduleConfig": "training",
    "init_adam": "training", "train_step": "training",
    "training_run": "training", "psnr": "training",
    "bench_attention": "bench", "format_report": "bench",
    "AttentionCounters": "attention",
}

__all__ = ["__version__"] + sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        import importlib
        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        value = getattr(module, name)
        globals()[name] = value
        return value
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(set(globals()) | set(__all__))
