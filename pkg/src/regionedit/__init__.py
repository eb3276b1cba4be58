"""Region-aware image editing with a windowed flow transformer.

Edits are expressed as token regions on a patch grid. The editor
refines a coarse user mask with a low-resolution proxy edit, assembles
one integrated token sequence (noisy region tokens, frozen source
tokens, text, anchors, optional control), runs a truncated rectified
flow initialized from the upsampled proxy, and composites the result so
untouched pixels pass through bit for bit.

Submodules import numpy; this namespace resolves attributes lazily so
process-level knobs (thread pinning in the CLI) can act first.
"""

_EXPORTS = {
    "errors": ("RegionEditError", "ConfigError", "DimensionError",
               "NumericError", "DivergenceError", "ContractError",
               "PlanError", "PlacementError", "StalenessError",
               "ResampleError", "FormatError", "UsageError"),
    "rng": ("Rng",),
    "hten": ("read_hten", "write_hten"),
    "tensor": ("Tensor", "no_grad"),
    "rope": ("RopeParams", "rope_angles", "rope_rotate", "grid_coords",
             "anchor_coords", "reference_coords", "text_coords"),
    "attention": ("TokenRole", "AttentionPlan", "Window",
                  "build_window_plan", "dense_mma", "windowed_mma",
                  "masked_equivalent_dense", "role_bias", "KvCache",
                  "cache_condition_kv", "fetch_condition_kv", "flop_count"),
    "imageio": ("load_image", "save_image", "load_mask", "save_mask"),
    "region": ("downsample", "upsample_nearest", "upsample_bilinear",
               "proxy_change_mask", "refine_mask", "refine_bbox",
               "pixel_mask_to_tokens", "mask_to_windows", "patchify",
               "unpatchify", "IntegratedTokens", "integrate_tokens",
               "composite"),
    "flow": ("FlowSchedule", "interpolate", "intermediate_init",
             "euler_sample", "sharpen_upsample"),
    "model": ("ModelConfig", "Model", "AssembledSequence",
              "assemble_sequence", "build_static_cache", "noisy_forward",
              "flow_matching_loss", "AdamW", "train_step",
              "save_checkpoint", "load_checkpoint"),
    "pipeline": ("PipelineConfig", "EditRequest", "EditResult",
                 "ProxyEditor", "SyntheticProxyEditor", "Scene",
                 "synthetic_scene", "synthetic_dataset", "scene_to_sample",
                 "TrainConfig", "train_pipeline_model", "run_edit",
                 "OP_NAMES", "op_id", "apply_op"),
    "config": ("parse_kv_file", "split_sections", "build_dataclass",
               "default_config_path"),
}

_ORIGIN = {name: mod for mod, names in _EXPORTS.items() for name in names}

__all__ = sorted(_ORIGIN)
__version__ = "0.1.0"


def __getattr__(name):
    mod = _ORIGIN.get(name)
    if mod is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    import importlib

    value = getattr(importlib.import_module(f".{mod}", __name__), name)
    globals()[name] = value
    return value


def __dir__():
    return sorted(set(globals()) | set(__all__))
