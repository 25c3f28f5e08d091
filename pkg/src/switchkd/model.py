"""Desk-scale modular vision-language model: visual encoder, projector, LM.

Parameters live in three disjoint groups named ``V``, ``P`` and ``L``.
Images are ``[B, H, W, C]`` float arrays (a single ``[H, W, C]`` image is
accepted too), prompts are integer token arrays ``[B, T]``.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Iterator

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from . import autodiff as ad
from .autodiff import DiffArray
from .errors import CompatibilityError, ContractError, ShapeError

GROUPS = ("V", "P", "L")
NEG_INF = -1e30
CHECKPOINT_FORMAT = "switchkd-checkpoint"
CHECKPOINT_VERSION = 1


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    image_size: tuple[int, int, int] = (8, 8, 3)
    vision_dim: int = 32
    n_visual_tokens: int = 4
    lm_dim: int = 32
    lm_layers: int = 2
    lm_heads: int = 4
    vocab_size: int = 64
    max_seq_len: int = 16

    @model_validator(mode="after")
    def _check(self):
        for name in ("vision_dim", "n_visual_tokens", "lm_dim", "lm_layers", "lm_heads",
                     "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lm_dim % self.lm_heads:
            raise ValueError("lm_dim must be divisible by lm_heads")
        h, w, c = self.image_size
        g = math.isqrt(self.n_visual_tokens)
        if g * g != self.n_visual_tokens or h % g or w % g or c <= 0:
            raise ValueError("n_visual_tokens must be a square grid that tiles image_size")
        if self.max_seq_len <= self.n_visual_tokens:
            raise ValueError("max_seq_len must leave room for text after the visual prefix")
        return self

    @property
    def patch_grid(self) -> int:
        return math.isqrt(self.n_visual_tokens)

    @property
    def patch_dim(self) -> int:
        h, w, c = self.image_size
        g = self.patch_grid
        return (h // g) * (w // g) * c


SWITCH_FIELDS = ("vocab_size", "image_size", "vision_dim", "n_visual_tokens")


def check_switch_compatible(teacher: ModelConfig, student: ModelConfig) -> None:
    for name in SWITCH_FIELDS:
        tv, sv = getattr(teacher, name), getattr(student, name)
        if tv != sv:
            raise CompatibilityError(name, tv, sv)


def _param_shapes(cfg: ModelConfig) -> dict[str, list[tuple[str, tuple[int, ...]]]]:
    d_v, d, n = cfg.vision_dim, cfg.lm_dim, cfg.vocab_size
    shapes = {
        "V": [
            ("V.patch_w", (cfg.patch_dim, d_v)), ("V.patch_b", (d_v,)),
            ("V.pos", (cfg.n_visual_tokens, d_v)),
            ("V.mlp_w1", (d_v, d_v)), ("V.mlp_b1", (d_v,)),
            ("V.mlp_w2", (d_v, d_v)), ("V.mlp_b2", (d_v,)),
        ],
        "P": [
            ("P.w1", (d_v, d)), ("P.b1", (d,)),
            ("P.w2", (d, d)), ("P.b2", (d,)),
        ],
        "L": [("L.tok_emb", (n, d)), ("L.pos_emb", (cfg.max_seq_len, d))],
    }
    for i in range(cfg.lm_layers):
        p = f"L.blocks.{i}."
        shapes["L"] += [
            (p + "ln1_g", (d,)), (p + "ln1_b", (d,)),
            (p + "wq", (d, d)), (p + "wk", (d, d)), (p + "wv", (d, d)),
            (p + "wo", (d, d)), (p + "bo", (d,)),
            (p + "ln2_g", (d,)), (p + "ln2_b", (d,)),
            (p + "mlp_w1", (d, 4 * d)), (p + "mlp_b1", (4 * d,)),
            (p + "mlp_w2", (4 * d, d)), (p + "mlp_b2", (d,)),
        ]
    shapes["L"] += [("L.lnf_g", (d,)), ("L.lnf_b", (d,)), ("L.head_w", (d, n)), ("L.head_b", (n,))]
    return shapes


def _init_value(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if len(shape) == 2:
        bound = 1.0 / math.sqrt(shape[0])
        return rng.uniform(-bound, bound, size=shape)
    if name.endswith("_g"):
        return np.ones(shape)
    return np.zeros(shape)


class ToyVLM:
    """Parameters of one (V, P, L) model plus per-group trainable flags."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, zero: bool = False):
        self.cfg = cfg
        self.params: dict[str, DiffArray] = {}
        self.groups: dict[str, list[str]] = {}
        self.trainable = {g: True for g in GROUPS}
        for gi, (group, entries) in enumerate(_param_shapes(cfg).items()):
            rng = np.random.default_rng([int(seed), gi])
            self.groups[group] = []
            for name, shape in entries:
                value = np.zeros(shape) if zero else _init_value(name, shape, rng)
                self.params[name] = ad.parameter(value, name=name)
                self.groups[group].append(name)

    def __getitem__(self, name: str) -> DiffArray:
        return self.params[name]

    def named_parameters(self, group: str | None = None) -> Iterator[tuple[str, DiffArray]]:
        names = self.params if group is None else self.groups[group]
        for name in names:
            yield name, self.params[name]

    def group_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def set_trainable(self, **flags: bool) -> None:
        for group, flag in flags.items():
            if group not in GROUPS:
                raise KeyError(group)
            self.trainable[group] = bool(flag)
            for _, p in self.named_parameters(group):
                p.requires_grad = bool(flag)

    def freeze(self) -> None:
        self.set_trainable(V=False, P=False, L=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise ShapeError(f"parameter names differ: {sorted(missing)[:5]}")
        for name, value in state.items():
            value = np.asarray(value, dtype=np.float64)
            if value.shape != self.params[name].shape:
                raise ShapeError(f"{name}: expected {self.params[name].shape}, got {value.shape}")
            self.params[name].data = value.copy()

    def copy_group_from(self, other: "ToyVLM", group: str) -> None:
        for name, p in other.named_parameters(group):
            if self.params[name].shape != p.shape:
                raise ShapeError(f"{name}: shapes differ between models")
            self.params[name].data = p.data.copy()

    def clone(self) -> "ToyVLM":
        twin = ToyVLM(self.cfg, zero=True)
        twin.load_state_dict(self.state_dict())
        twin.set_trainable(**self.trainable)
        return twin

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()


# -- forward passes ------------------------------------------------------------------
def _batched_images(cfg: ModelConfig, images) -> tuple[np.ndarray, bool]:
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(cfg.image_size):
        raise ShapeError(f"expected images of size {cfg.image_size}, got {x.shape}")
    return x, single


def patchify(cfg: ModelConfig, images: np.ndarray) -> np.ndarray:
    b, h, w, c = images.shape
    g = cfg.patch_grid
    ph, pw = h // g, w // g
    x = images.reshape(b, g, ph, g, pw, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, ph * pw * c)


def encode_image(model: ToyVLM, images) -> DiffArray:
    """Visual features ``[B, n_visual_tokens, vision_dim]`` (unbatched for one image)."""
    x, single = _batched_images(model.cfg, images)
    h0 = ad.matmul(patchify(model.cfg, x), model["V.patch_w"]) + model["V.patch_b"] + model["V.pos"]
    hidden = ad.gelu(ad.matmul(h0, model["V.mlp_w1"]) + model["V.mlp_b1"])
    out = h0 + ad.matmul(hidden, model["V.mlp_w2"]) + model["V.mlp_b2"]
    return out[0] if single else out


def project(model: ToyVLM, features) -> DiffArray:
    """Row-wise two-layer GELU MLP from vision width to LM width."""
    features = ad.as_array(features)
    if features.shape[-1] != model.cfg.vision_dim:
        raise ShapeError(
            f"projector expects width {model.cfg.vision_dim}, got {features.shape[-1]}")
    hidden = ad.gelu(ad.matmul(features, model["P.w1"]) + model["P.b1"])
    return ad.matmul(hidden, model["P.w2"]) + model["P.b2"]


def _causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), NEG_INF), k=1)


def _attention(model: ToyVLM, prefix: str, x: DiffArray) -> DiffArray:
    b, t, d = x.shape
    nh = model.cfg.lm_heads
    dh = d // nh

    def heads(w):
        return ad.transpose(ad.reshape(ad.matmul(x, model[prefix + w]), (b, t, nh, dh)), (0, 2, 1, 3))

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    scores = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh)) + _causal_mask(t)
    att = ad.matmul(ad.softmax(scores, axis=-1), v)
    merged = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (b, t, d))
    return ad.matmul(merged, model[prefix + "wo"]) + model[prefix + "bo"]


def lm_forward(model: ToyVLM, visual_tokens, text_tokens) -> DiffArray:
    """Logits ``[B, T_text, N]`` for the text positions of a visual-prefixed sequence."""
    cfg = model.cfg
    vis = ad.as_array(visual_tokens)
    ids = np.asarray(text_tokens, dtype=np.int64)
    single = vis.ndim == 2
    if single:
        vis = ad.reshape(vis, (1,) + vis.shape)
        ids = ids[None]
    if vis.shape[-1] != cfg.lm_dim:
        raise ShapeError(f"visual tokens have width {vis.shape[-1]}, LM expects {cfg.lm_dim}")
    if ids.ndim != 2 or ids.shape[0] != vis.shape[0]:
        raise ShapeError(f"text tokens must be [B, T] matching batch {vis.shape[0]}")
    n_v, t_text = vis.shape[1], ids.shape[1]
    total = n_v + t_text
    if total > cfg.max_seq_len:
        raise ContractError(f"sequence length {total} exceeds max_seq_len {cfg.max_seq_len}")
    emb = ad.gather(model["L.tok_emb"], ids, axis=0)
    x = ad.concat([vis, emb], axis=1) + ad.gather(model["L.pos_emb"], np.arange(total), axis=0)
    for i in range(cfg.lm_layers):
        p = f"L.blocks.{i}."
        x = x + _attention(model, p, ad.layer_norm(x, model[p + "ln1_g"], model[p + "ln1_b"]))
        h = ad.layer_norm(x, model[p + "ln2_g"], model[p + "ln2_b"])
        h = ad.gelu(ad.matmul(h, model[p + "mlp_w1"]) + model[p + "mlp_b1"])
        x = x + ad.matmul(h, model[p + "mlp_w2"]) + model[p + "mlp_b2"]
    x = ad.layer_norm(x, model["L.lnf_g"], model["L.lnf_b"])
    logits = ad.matmul(x[:, n_v:, :], model["L.head_w"]) + model["L.head_b"]
    return logits[0] if single else logits


def vlm_forward(model: ToyVLM, images, text_tokens) -> DiffArray:
    return lm_forward(model, project(model, encode_image(model, images)), text_tokens)


def switch_forward(student: ToyVLM, teacher: ToyVLM, images, text_tokens) -> DiffArray:
    """Teacher projector and LM reading the student's visual features."""
    check_switch_compatible(teacher.cfg, student.cfg)
    return lm_forward(teacher, project(teacher, encode_image(student, images)), text_tokens)


# -- checkpoints ---------------------------------------------------------------------
def save_checkpoint(model: ToyVLM, path, extra: dict | None = None) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float64 blob)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path, blob_path = path.with_suffix(".json"), path.with_suffix(".bin")
    entries, chunks, offset = [], [], 0
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({"name": name, "group": model.group_of(name), "shape": list(p.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dtype": "<f8",
        "blob": blob_path.name,
        "config": model.cfg.model_dump(mode="json"),
        "groups": {g: list(model.groups[g]) for g in GROUPS},
        "params": entries,
        "extra": extra or {},
    }
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest_path


def load_checkpoint(path) -> tuple[ToyVLM, dict]:
    manifest_path = Path(path).with_suffix(".json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{manifest_path} is not a checkpoint manifest")
    cfg = ModelConfig.model_validate(manifest["config"])
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    state = {}
    for e in manifest["params"]:
        raw = blob[e["offset"]: e["offset"] + e["nbytes"]]
        state[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    model = ToyVLM(cfg, zero=True)
    model.load_state_dict(state)
    return model, manifest.get("extra", {})
