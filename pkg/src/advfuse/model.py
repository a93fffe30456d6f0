"""Single-stream transformer over a fused [CLS] + tokens + regions sequence.

The encoder consumes word embeddings on the text side and projected region
features on the image side, runs post-LN self-attention blocks, and exposes
three task heads (masked-token prediction, pair matching, answer
classification). Perturbation tensors enter additively: on the text side at
the word-embedding level, on the image side at the raw region features before
projection. Positional and modality-type embeddings are never perturbed.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    constant,
    gather,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    scale,
    slice_axis,
    softmax,
    transpose,
)
from .errors import ContractError, ShapeMismatchError

PAD_ID = 0
CLS_ID = 1
MASK_ID = 2

TASKS = ("mlm", "itm", "answer")

_NEG_INF = -1e9
_INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    hidden: int = 64
    num_heads: int = 4
    vocab_size: int = 64
    max_tokens: int = 16
    max_regions: int = 8
    region_feat_dim: int = 32
    num_answers: int = 4

    def __post_init__(self):
        for name in (
            "num_layers",
            "hidden",
            "num_heads",
            "vocab_size",
            "max_tokens",
            "max_regions",
            "region_feat_dim",
            "num_answers",
        ):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ContractError(f"ModelConfig.{name} must be a positive int, got {v!r}")
        if self.hidden % self.num_heads != 0:
            raise ContractError(
                f"hidden ({self.hidden}) must be divisible by num_heads ({self.num_heads})"
            )
        if self.vocab_size <= MASK_ID:
            raise ContractError("vocab_size must leave room for [PAD]/[CLS]/[MASK]")

    @property
    def head_dim(self):
        return self.hidden // self.num_heads


_HEAD_PREFIXES = ("mlm_head", "itm_head", "answer_head")


def _param_shapes(config):
    """Name -> (shape, kind) in a fixed order; kind picks the initializer."""
    h, ffh = config.hidden, 4 * config.hidden
    shapes = [
        ("word_embedding", (config.vocab_size, h), "normal"),
        ("image_projection_w", (config.region_feat_dim, h), "normal"),
        ("image_projection_b", (h,), "zeros"),
        ("token_position_embedding", (config.max_tokens, h), "normal"),
        ("region_position_w", (4, h), "normal"),
        ("modality_type_embedding", (2, h), "normal"),
    ]
    for i in range(config.num_layers):
        p = f"layer{i}."
        shapes += [
            (p + "attn_q_w", (h, h), "normal"),
            (p + "attn_q_b", (h,), "zeros"),
            (p + "attn_k_w", (h, h), "normal"),
            (p + "attn_k_b", (h,), "zeros"),
            (p + "attn_v_w", (h, h), "normal"),
            (p + "attn_v_b", (h,), "zeros"),
            (p + "attn_out_w", (h, h), "normal"),
            (p + "attn_out_b", (h,), "zeros"),
            (p + "ln1_gain", (h,), "ones"),
            (p + "ln1_bias", (h,), "zeros"),
            (p + "ff1_w", (h, ffh), "normal"),
            (p + "ff1_b", (ffh,), "zeros"),
            (p + "ff2_w", (ffh, h), "normal"),
            (p + "ff2_b", (h,), "zeros"),
            (p + "ln2_gain", (h,), "ones"),
            (p + "ln2_bias", (h,), "zeros"),
        ]
    shapes += [
        ("mlm_head_w", (h, config.vocab_size), "normal"),
        ("mlm_head_b", (config.vocab_size,), "zeros"),
        ("itm_head_w", (h, 2), "normal"),
        ("itm_head_b", (2,), "zeros"),
        ("answer_head_w", (h, config.num_answers), "normal"),
        ("answer_head_b", (config.num_answers,), "zeros"),
    ]
    return shapes


class ModelParams:
    """Ordered name -> Tensor map; every tensor requires gradient."""

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config, rng):
        tensors = {}
        for name, shape, kind in _param_shapes(config):
            if kind == "normal":
                values = rng.normal(0.0, _INIT_STD, size=shape)
            elif kind == "ones":
                values = np.ones(shape)
            else:
                values = np.zeros(shape)
            tensors[name] = Tensor(values, requires_grad=True)
        return cls(config, tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def encoder_names(self):
        return [n for n in self.tensors if not n.startswith(_HEAD_PREFIXES)]

    def head_names(self):
        return [n for n in self.tensors if n.startswith(_HEAD_PREFIXES)]

    def count(self):
        return sum(t.values.size for t in self.tensors.values())

    def copy(self):
        return ModelParams(
            self.config,
            {n: Tensor(t.values.copy(), requires_grad=True) for n, t in self.tensors.items()},
        )


@dataclass
class MultimodalBatch:
    img_feats: np.ndarray        # B x R x region_feat_dim
    region_boxes: np.ndarray     # B x R x 4, normalized [0, 1]
    txt_tokens: np.ndarray       # B x T, int
    txt_mask: np.ndarray         # B x T, 0/1
    region_mask: np.ndarray      # B x R, 0/1
    mlm_targets: Optional[np.ndarray] = None   # B x T, -1 at unmasked
    itm_label: Optional[np.ndarray] = None     # B, 0/1
    answer_label: Optional[np.ndarray] = None  # B, class id
    meta: dict = field(default_factory=dict)

    @property
    def size(self):
        return self.txt_tokens.shape[0]

    def validate(self, config=None):
        b, t = self.txt_tokens.shape
        if self.img_feats.shape[:2] != self.region_mask.shape:
            raise ContractError("img_feats and region_mask disagree on B x R")
        if self.region_boxes.shape != self.img_feats.shape[:2] + (4,):
            raise ContractError("region_boxes must be B x R x 4")
        if self.txt_mask.shape != (b, t):
            raise ContractError("txt_mask must match txt_tokens")
        if not np.all(self.txt_tokens[:, 0] == CLS_ID):
            raise ContractError("txt_tokens[:, 0] must be the [CLS] id")
        for name, m in (("txt_mask", self.txt_mask), ("region_mask", self.region_mask)):
            if not np.all((m == 0) | (m == 1)):
                raise ContractError(f"{name} entries must be 0 or 1")
        if np.any(self.img_feats[self.region_mask == 0] != 0.0):
            raise ContractError("padded region features must be zero")
        labels = [
            x for x in (self.mlm_targets, self.itm_label, self.answer_label) if x is not None
        ]
        if len(labels) > 1:
            raise ContractError("exactly one label family may be active")
        if config is not None:
            if t > config.max_tokens or self.img_feats.shape[1] > config.max_regions:
                raise ContractError("batch exceeds configured sequence capacity")
            if self.img_feats.shape[2] != config.region_feat_dim:
                raise ContractError("region feature dimension mismatch")
        return self


@dataclass
class ModelOutput:
    cls_repr: Tensor                 # B x hidden
    task_logits: Tensor              # task-dependent leading shape x classes
    attention: list                  # per layer: B x heads x S x S tensors
    clean_probs: Tensor              # softmax of task_logits
    task: str
    fused_mask: np.ndarray           # B x S, 0/1
    num_tokens: int
    mlm_rows: Optional[tuple] = None       # (batch idx, token idx) of scored rows
    mlm_flat_targets: Optional[np.ndarray] = None


def _delta_for(delta, attr, expected_shape, what):
    """Pull one modality's perturbation tensor off ``delta`` and check shape."""
    if delta is None:
        return None
    d = getattr(delta, attr, None)
    if d is None:
        return None
    t = d if isinstance(d, Tensor) else Tensor(np.asarray(d, dtype=np.float64))
    if t.values.shape != expected_shape:
        raise ContractError(
            f"{what} perturbation shape {t.values.shape} does not match batch {expected_shape}"
        )
    return t


def embed_inputs(params, batch, delta=None):
    """Fused B x S x hidden sequence: text block then region block.

    Text side: word embedding (+ delta_txt) + token position + type.
    Image side: projection(raw features + delta_img) + box position + type.
    Perturbations at padded positions are masked to zero so they can neither
    move the embedding nor receive gradient.
    """
    cfg = params.config
    b, t = batch.txt_tokens.shape
    r = batch.img_feats.shape[1]

    txt = gather(params["word_embedding"], batch.txt_tokens)
    d_txt = _delta_for(delta, "delta_txt", (b, t, cfg.hidden), "text")
    if d_txt is not None:
        keep = constant(np.broadcast_to(batch.txt_mask[:, :, None], (b, t, cfg.hidden)).copy())
        txt = add(txt, mul(d_txt, keep))
    positions = np.broadcast_to(np.arange(t), (b, t))
    txt = add(txt, gather(params["token_position_embedding"], positions))
    txt = add(txt, gather(params["modality_type_embedding"], np.zeros((b, t), dtype=np.int64)))

    feats = constant(batch.img_feats)
    d_img = _delta_for(delta, "delta_img", (b, r, cfg.region_feat_dim), "image")
    if d_img is not None:
        keep = constant(
            np.broadcast_to(batch.region_mask[:, :, None], (b, r, cfg.region_feat_dim)).copy()
        )
        feats = add(feats, mul(d_img, keep))
    img = add(matmul(feats, params["image_projection_w"]), params["image_projection_b"])
    img = add(img, matmul(constant(batch.region_boxes), params["region_position_w"]))
    img = add(img, gather(params["modality_type_embedding"], np.ones((b, r), dtype=np.int64)))

    return concat([txt, img], axis=1)


def _split_heads(x, b, s, heads, dh):
    return transpose(reshape(x, (b, s, heads, dh)), (0, 2, 1, 3))


def _encoder(params, batch, delta):
    """Shared trunk: embeddings plus attention blocks.

    Returns the final B x S x hidden sequence, the per-layer attention maps,
    and the fused validity mask.
    """
    cfg = params.config
    b, t = batch.txt_tokens.shape
    r = batch.img_feats.shape[1]
    s = t + r
    heads, dh = cfg.num_heads, cfg.head_dim

    x = embed_inputs(params, batch, delta)
    fused_mask = np.concatenate([batch.txt_mask, batch.region_mask], axis=1)
    bias_np = np.broadcast_to(
        (1.0 - fused_mask)[:, None, None, :] * _NEG_INF, (b, heads, s, s)
    ).copy()
    attn_bias = constant(bias_np)
    inv_sqrt_dh = 1.0 / np.sqrt(dh)

    maps = []
    for i in range(cfg.num_layers):
        p = f"layer{i}."
        q = add(matmul(x, params[p + "attn_q_w"]), params[p + "attn_q_b"])
        k = add(matmul(x, params[p + "attn_k_w"]), params[p + "attn_k_b"])
        v = add(matmul(x, params[p + "attn_v_w"]), params[p + "attn_v_b"])
        q = _split_heads(q, b, s, heads, dh)
        k = _split_heads(k, b, s, heads, dh)
        v = _split_heads(v, b, s, heads, dh)

        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), inv_sqrt_dh)
        probs = softmax(add(scores, attn_bias))
        maps.append(probs)

        ctx = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (b, s, cfg.hidden))
        ctx = add(matmul(ctx, params[p + "attn_out_w"]), params[p + "attn_out_b"])
        x = layer_norm(add(x, ctx), params[p + "ln1_gain"], params[p + "ln1_bias"])

        ff = gelu(add(matmul(x, params[p + "ff1_w"]), params[p + "ff1_b"]))
        ff = add(matmul(ff, params[p + "ff2_w"]), params[p + "ff2_b"])
        x = layer_norm(add(x, ff), params[p + "ln2_gain"], params[p + "ln2_bias"])

    return x, maps, fused_mask


def forward(params, batch, delta=None, task="answer"):
    """Full pass to task logits; pure in (params, batch, delta, task)."""
    if task not in TASKS:
        raise ContractError(f"unknown task {task!r}; expected one of {TASKS}")
    cfg = params.config
    b, t = batch.txt_tokens.shape

    x, maps, fused_mask = _encoder(params, batch, delta)
    cls_repr = reshape(slice_axis(x, 1, 0, 1), (b, cfg.hidden))

    mlm_rows = None
    flat_targets = None
    if task == "mlm":
        if batch.mlm_targets is None:
            raise ContractError("task=mlm requires batch.mlm_targets")
        rows_b, rows_t = np.nonzero(batch.mlm_targets >= 0)
        mlm_rows = (rows_b, rows_t)
        flat_targets = batch.mlm_targets[rows_b, rows_t]
        text = slice_axis(x, 1, 0, t)
        flat = reshape(text, (b * t, cfg.hidden))
        picked = gather(flat, rows_b * t + rows_t)
        logits = add(matmul(picked, params["mlm_head_w"]), params["mlm_head_b"])
    elif task == "itm":
        logits = add(matmul(cls_repr, params["itm_head_w"]), params["itm_head_b"])
    else:
        logits = add(matmul(cls_repr, params["answer_head_w"]), params["answer_head_b"])

    return ModelOutput(
        cls_repr=cls_repr,
        task_logits=logits,
        attention=maps,
        clean_probs=softmax(logits),
        task=task,
        fused_mask=fused_mask,
        num_tokens=t,
        mlm_rows=mlm_rows,
        mlm_flat_targets=flat_targets,
    )


def attention_probe(output, sample, layer, head, region_index, token_span):
    """Max attention weight from one region's position onto a token span."""
    start, stop = token_span
    if not 0 <= layer < len(output.attention):
        raise ContractError(f"layer {layer} out of range")
    probs = output.attention[layer].values
    b, heads, s, _ = probs.shape
    t = output.num_tokens
    r = s - t
    if not 0 <= sample < b:
        raise ContractError(f"sample {sample} out of range")
    if not 0 <= head < heads:
        raise ContractError(f"head {head} out of range")
    if not 0 <= region_index < r:
        raise ContractError(f"region index {region_index} out of range")
    if not (0 <= start < stop <= t):
        raise ContractError(f"token span [{start}, {stop}) invalid for {t} tokens")
    row = probs[sample, head, t + region_index]
    return float(row[start:stop].max())
