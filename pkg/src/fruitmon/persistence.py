"""Model-level checkpoint helpers.

Segmentation models save as kind "segmentation"; the encoder and matcher
save together as one "reid" bundle with namespaced tensors, so a single
file can be handed to both the descriptor and association stages.
"""
from __future__ import annotations

from dataclasses import asdict

from .encoder import EncoderConfig, EncoderModel
from .errors import ShapeError
from .matcher import MatchConfig, MatchModel
from .nnkernels.params import ParamStore, check_kind, load_checkpoint, save_checkpoint
from .segmentation import SegModel, SegNetConfig

SEG_KIND = "segmentation"
REID_KIND = "reid"


def _config_dict(cfg) -> dict:
    out = asdict(cfg)
    for key, value in out.items():
        if isinstance(value, tuple):
            out[key] = list(value)
    return out


def _tupled(section: dict, keys: tuple[str, ...]) -> dict:
    out = dict(section)
    for key in keys:
        if key in out:
            out[key] = tuple(out[key])
    return out


def save_seg_model(path, model: SegModel) -> None:
    save_checkpoint(path, model.store, kind=SEG_KIND, config=_config_dict(model.config))


def load_seg_model(path) -> SegModel:
    store, header = load_checkpoint(path)
    check_kind(header, SEG_KIND, path)
    config = SegNetConfig(**_tupled(header["config"], ("channels",)))
    return SegModel(config, store)


def save_reid_models(path, enc_model: EncoderModel, match_model: MatchModel) -> None:
    bundle = ParamStore(enc_model.store.rng_seed)
    for prefix, store in (("encoder", enc_model.store), ("matcher", match_model.store)):
        for name, var in store.params.items():
            bundle.add_param(f"{prefix}.{name}", var.value)
        for name, buf in store.buffers.items():
            bundle.add_buffer(f"{prefix}.{name}", buf)
    config = {
        "encoder": _config_dict(enc_model.config),
        "matcher": _config_dict(match_model.config),
    }
    save_checkpoint(path, bundle, kind=REID_KIND, config=config)


def _split(store: ParamStore, prefix: str, seed: int) -> ParamStore:
    sub = ParamStore(seed)
    dotted = prefix + "."
    for name, var in store.params.items():
        if name.startswith(dotted):
            sub.add_param(name[len(dotted):], var.value)
    for name, buf in store.buffers.items():
        if name.startswith(dotted):
            sub.add_buffer(name[len(dotted):], buf)
    if not sub.params:
        raise ShapeError(f"checkpoint holds no {prefix!r} tensors")
    return sub


def load_reid_models(enc_path, match_path=None) -> tuple[EncoderModel, MatchModel]:
    """Load the encoder and matcher halves; both paths may point at the
    same bundle file (it is read once)."""
    store, header = load_checkpoint(enc_path)
    check_kind(header, REID_KIND, enc_path)
    if match_path is not None and str(match_path) != str(enc_path):
        match_store, match_header = load_checkpoint(match_path)
        check_kind(match_header, REID_KIND, match_path)
    else:
        match_store, match_header = store, header
    enc_config = EncoderConfig(**_tupled(header["config"]["encoder"], ("channels",)))
    match_config = MatchConfig(**match_header["config"]["matcher"])
    seed = header.get("rng_seed", 0)
    enc = EncoderModel(enc_config, _split(store, "encoder", seed))
    match = MatchModel(match_config, _split(match_store, "matcher",
                                            match_header.get("rng_seed", 0)))
    return enc, match
