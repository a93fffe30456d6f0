"""Synthetic paired image-text data over a fixed concept vocabulary.

A world holds unit-norm concept prototypes in region-feature space and an
injective concept-to-token map. Images are noisy copies of prototypes,
captions name a subset of the depicted concepts, and three tasks are carved
out of the pairs: masked-token prediction, image-text matching, and
answer classification (how many regions show the queried concept).

Sample generation is counter-seeded: every sample's randomness comes from a
SeedSequence keyed by (base, index), so batches are reproducible regardless
of generation order.
"""

import json

import numpy as np

from .errors import ContractError
from .model import CLS_ID, MASK_ID, PAD_ID, MultimodalBatch

MASK_PROB = 0.15
_MIN_REGIONS = 4
_CAPTION_KEEP_PROB = 0.7
_MAX_PROTOTYPE_TRIES = 200


class WorldSpec:
    """Concept prototypes plus the token map; immutable after construction."""

    def __init__(self, config, num_concepts=16, noise_sigma=0.1, seed=0):
        if num_concepts < 1:
            raise ContractError("num_concepts must be positive")
        if noise_sigma < 0:
            raise ContractError("noise_sigma must be nonnegative")
        first_filler = 3 + num_concepts
        if first_filler >= config.vocab_size:
            raise ContractError(
                f"vocab_size {config.vocab_size} cannot hold {num_concepts} concept "
                "tokens plus filler tokens after the 3 reserved ids"
            )
        self.config = config
        self.num_concepts = num_concepts
        self.noise_sigma = float(noise_sigma)
        self.seed = int(seed)
        self.first_filler = first_filler
        self.prototypes = self._build_prototypes()

    def _build_prototypes(self):
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xA11CE]))
        margin = 4.0 * self.noise_sigma
        d = self.config.region_feat_dim
        protos = np.zeros((self.num_concepts, d))
        for i in range(self.num_concepts):
            for attempt in range(_MAX_PROTOTYPE_TRIES):
                v = rng.normal(size=d)
                v /= np.sqrt((v * v).sum())
                if i == 0 or np.sqrt(((protos[:i] - v) ** 2).sum(axis=1)).min() > margin:
                    protos[i] = v
                    break
            else:
                raise ContractError(
                    f"could not place {self.num_concepts} prototypes with margin {margin}"
                )
        return protos

    def concept_token(self, concept):
        if not 0 <= concept < self.num_concepts:
            raise ContractError(f"concept {concept} out of range")
        return 3 + concept

    def token_concept(self, token):
        c = token - 3
        return c if 0 <= c < self.num_concepts else -1


def _sample_rng(base, index):
    return np.random.default_rng(np.random.SeedSequence([int(base), int(index)]))


def _draw_base(rng):
    return int(rng.integers(0, 2**63))


def gen_pair(world, rng, region_concepts=None):
    """One image-caption pair as fixed-size padded arrays plus metadata.

    ``region_concepts`` overrides the sampled concept multiset (used by the
    counting task to control the label).
    """
    cfg = world.config
    r_max, t_max = cfg.max_regions, cfg.max_tokens

    if region_concepts is None:
        n_regions = int(rng.integers(_MIN_REGIONS, r_max + 1))
        region_concepts = rng.integers(0, world.num_concepts, size=n_regions)
    else:
        region_concepts = np.asarray(region_concepts)
        n_regions = len(region_concepts)
        if n_regions > r_max:
            raise ContractError(f"{n_regions} regions exceed max_regions {r_max}")

    feats = np.zeros((r_max, cfg.region_feat_dim))
    boxes = np.zeros((r_max, 4))
    feats[:n_regions] = world.prototypes[region_concepts]
    if world.noise_sigma > 0:
        feats[:n_regions] += rng.normal(0.0, world.noise_sigma,
                                        size=(n_regions, cfg.region_feat_dim))
    boxes[:n_regions] = rng.uniform(size=(n_regions, 4))
    region_mask = np.zeros(r_max)
    region_mask[:n_regions] = 1.0

    depicted = sorted(set(int(c) for c in region_concepts))
    named = [c for c in depicted if rng.uniform() < _CAPTION_KEEP_PROB]
    if not named and depicted:
        named = [depicted[int(rng.integers(0, len(depicted)))]]
    max_named = t_max - 1
    named = named[:max_named]

    tokens = np.full(t_max, PAD_ID, dtype=np.int64)
    tokens[0] = CLS_ID
    spans = {}
    pos = 1
    for c in named:
        tokens[pos] = world.concept_token(c)
        spans[c] = (pos, pos + 1)
        pos += 1
    room = t_max - pos
    n_filler = int(rng.integers(0, room + 1)) if room > 0 else 0
    if n_filler and world.first_filler < cfg.vocab_size:
        tokens[pos:pos + n_filler] = rng.integers(
            world.first_filler, cfg.vocab_size, size=n_filler)
        pos += n_filler
    txt_mask = np.zeros(t_max)
    txt_mask[:pos] = 1.0

    meta = {
        "region_concepts": [int(c) for c in region_concepts] + [-1] * (r_max - n_regions),
        "named_concepts": named,
        "concept_spans": spans,
        "n_regions": n_regions,
        "n_tokens": pos,
    }
    return feats, boxes, tokens, txt_mask, region_mask, meta


def _assemble(world, samples, metas):
    feats, boxes, tokens, tmask, rmask = (np.stack(x) for x in zip(*samples))
    batch = MultimodalBatch(
        img_feats=feats,
        region_boxes=boxes,
        txt_tokens=tokens,
        txt_mask=tmask,
        region_mask=rmask,
        meta={"samples": metas},
    )
    return batch


def gen_pretrain_batch(world, batch_size, task, rng, mask_prob=MASK_PROB):
    """Masked-token or pair-matching batch drawn with per-sample seeding."""
    if task not in ("mlm", "itm"):
        raise ContractError(f"pretrain task must be mlm or itm, got {task!r}")
    if task == "itm" and batch_size < 2:
        raise ContractError("itm needs batch_size >= 2 to supply a mismatched caption")
    base = _draw_base(rng)
    samples, metas = [], []
    for i in range(batch_size):
        f, b, t, tm, rm, meta = gen_pair(world, _sample_rng(base, i))
        samples.append((f, b, t, tm, rm))
        metas.append(meta)
    batch = _assemble(world, samples, metas)
    batch_rng = _sample_rng(base, batch_size)

    if task == "mlm":
        tokens = batch.txt_tokens
        maskable = (batch.txt_mask == 1.0) & (tokens != CLS_ID)
        chosen = maskable & (batch_rng.uniform(size=tokens.shape) < mask_prob)
        if not chosen.any():
            rows, cols = np.nonzero(maskable)
            pick = int(batch_rng.integers(0, len(rows)))
            chosen[rows[pick], cols[pick]] = True
        targets = np.where(chosen, tokens, -1)
        batch.txt_tokens = np.where(chosen, MASK_ID, tokens)
        batch.mlm_targets = targets
    else:
        labels = np.ones(batch_size, dtype=np.int64)
        originals = batch.txt_tokens.copy()
        orig_mask = batch.txt_mask.copy()
        for i in range(batch_size):
            if batch_rng.uniform() < 0.5:
                j = int(batch_rng.integers(0, batch_size - 1))
                if j >= i:
                    j += 1
                batch.txt_tokens[i] = originals[j]
                batch.txt_mask[i] = orig_mask[j]
                labels[i] = 0
                metas[i]["caption_from"] = j
        batch.itm_label = labels

    return batch.validate(world.config)


def gen_probe_batch(world, batch_size, rng):
    """Unlabeled pairs with intact captions, for attention probing."""
    base = _draw_base(rng)
    samples, metas = [], []
    for i in range(batch_size):
        f, b, t, tm, rm, meta = gen_pair(world, _sample_rng(base, i))
        samples.append((f, b, t, tm, rm))
        metas.append(meta)
    return _assemble(world, samples, metas).validate(world.config)


def gen_downstream_batch(world, batch_size, rng):
    """Counting task: how many regions show the queried concept, 0 to 3.

    Class quotas are filled by constructing each sample's region multiset
    around the needed count, so the label histogram is balanced by design.
    """
    cfg = world.config
    if cfg.num_answers != 4:
        raise ContractError("the counting task is defined for num_answers == 4")
    base = _draw_base(rng)
    quota = [batch_size // 4] * 4
    for k in range(batch_size % 4):
        quota[k] += 1

    samples, metas, labels = [], [], []
    index = 0
    for label, n_needed in enumerate(quota):
        for _ in range(n_needed):
            s_rng = _sample_rng(base, index)
            index += 1
            query = int(s_rng.integers(0, world.num_concepts))
            others = [c for c in range(world.num_concepts) if c != query]
            n_regions = int(s_rng.integers(max(label, _MIN_REGIONS), cfg.max_regions + 1))
            concepts = [query] * label + [
                others[int(s_rng.integers(0, len(others)))]
                for _ in range(n_regions - label)
            ]
            concepts = np.asarray(concepts)
            s_rng.shuffle(concepts)
            f, b, t, tm, rm, meta = gen_pair(world, s_rng, region_concepts=concepts)

            t = np.full(cfg.max_tokens, PAD_ID, dtype=np.int64)
            t[0] = CLS_ID
            t[1] = world.concept_token(query)
            tm = np.zeros(cfg.max_tokens)
            tm[:2] = 1.0
            meta = dict(meta)
            meta["query_concept"] = query
            meta["query_span"] = (1, 2)
            meta["true_count"] = label
            meta["concept_spans"] = {query: (1, 2)}
            meta["named_concepts"] = [query]
            meta["n_tokens"] = 2

            samples.append((f, b, t, tm, rm))
            metas.append(meta)
            labels.append(label)

    order = _sample_rng(base, index).permutation(len(samples))
    samples = [samples[i] for i in order]
    metas = [metas[i] for i in order]
    labels = np.asarray(labels, dtype=np.int64)[order]

    batch = _assemble(world, samples, metas)
    batch.answer_label = labels
    return batch.validate(cfg)


def nearest_prototype_count(world, batch):
    """Brute-force oracle: count regions nearest to each query's prototype."""
    counts = []
    for i, meta in enumerate(batch.meta["samples"]):
        query = meta["query_concept"]
        n = meta["n_regions"]
        feats = batch.img_feats[i, :n]
        d2 = ((feats[:, None, :] - world.prototypes[None, :, :]) ** 2).sum(axis=2)
        nearest = d2.argmin(axis=1)
        counts.append(min(int((nearest == query).sum()), 3))
    return np.asarray(counts, dtype=np.int64)


def dump_dataset(batches, path):
    """One sample per line; float64 payloads round-trip bit-exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for batch in batches:
            for i in range(batch.size):
                record = {
                    "img_feats": batch.img_feats[i].tolist(),
                    "boxes": batch.region_boxes[i].tolist(),
                    "tokens": batch.txt_tokens[i].tolist(),
                    "txt_mask": batch.txt_mask[i].tolist(),
                    "region_mask": batch.region_mask[i].tolist(),
                    "labels": _labels_of(batch, i),
                    "meta": _jsonable_meta(batch.meta["samples"][i]),
                }
                fh.write(json.dumps(record) + "\n")


def _labels_of(batch, i):
    labels = {}
    if batch.mlm_targets is not None:
        labels["mlm"] = batch.mlm_targets[i].tolist()
    if batch.itm_label is not None:
        labels["itm"] = int(batch.itm_label[i])
    if batch.answer_label is not None:
        labels["answer"] = int(batch.answer_label[i])
    return labels


def _jsonable_meta(meta):
    out = {}
    for k, v in meta.items():
        if k == "concept_spans":
            out[k] = {str(c): list(s) for c, s in v.items()}
        elif isinstance(v, tuple):
            out[k] = list(v)
        else:
            out[k] = v
    return out


def load_dataset(path, world):
    """Rebuild the dumped samples into one batch, bit-exact."""
    samples, metas = [], []
    labels = {"mlm": [], "itm": [], "answer": []}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            samples.append((
                np.asarray(rec["img_feats"], dtype=np.float64),
                np.asarray(rec["boxes"], dtype=np.float64),
                np.asarray(rec["tokens"], dtype=np.int64),
                np.asarray(rec["txt_mask"], dtype=np.float64),
                np.asarray(rec["region_mask"], dtype=np.float64),
            ))
            meta = rec["meta"]
            if "concept_spans" in meta:
                meta["concept_spans"] = {
                    int(c): tuple(s) for c, s in meta["concept_spans"].items()
                }
            if "query_span" in meta:
                meta["query_span"] = tuple(meta["query_span"])
            metas.append(meta)
            for k in labels:
                labels[k].append(rec["labels"].get(k))
    if not samples:
        raise ContractError(f"no records in {path}")
    batch = _assemble(world, samples, metas)
    if all(v is not None for v in labels["mlm"]):
        batch.mlm_targets = np.asarray(labels["mlm"], dtype=np.int64)
    if all(v is not None for v in labels["itm"]):
        batch.itm_label = np.asarray(labels["itm"], dtype=np.int64)
    if all(v is not None for v in labels["answer"]):
        batch.answer_label = np.asarray(labels["answer"], dtype=np.int64)
    return batch.validate(world.config)
