"""Candidate verifiers: score a generation against its prompt without labels.

Three architectures share one connector + scorer stack and differ only in
where their visual features come from:

  * ``hidden_state``   - the generator's tap-layer activations, normalized
                         by pre-computed channel statistics; candidates only
                         need to run up to the tap.
  * ``ae_latent``      - the terminal latent z0, flattened over spatial
                         positions; needs a completed generation.
  * ``pixel_reencode`` - decoded pixels pushed through a frozen stand-in
                         visual encoder (patchify + attention blocks); the
                         decode and re-encode passes are fully metered.

The scorer is a compact transformer reading [projected features ++ prompt
attribute tokens] into a 2-logit yes/no head; the continuous score is the
probability of the sampled class, negated for "no", giving values in
[-1, -0.5] or [0.5, 1].

Parameters live in a flat ``{name: array}`` dict so training, checkpoints,
and freezing policies can address them uniformly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import scenes, toygen
from .numcore import (
    BlockWeights, MeterContext, Tensor, attention_block, concat_rows, gelu,
    linear, matmul, mean_pool,
)

MODES = ("hidden_state", "ae_latent", "pixel_reencode")

_BLOCK_FIELDS = ("ln1_gamma", "ln1_beta", "wq", "wk", "wv", "wo",
                 "ln2_gamma", "ln2_beta", "w1", "b1", "w2", "b2", "t_bias")


class VerifierConfigError(ValueError):
    """Invalid verifier configuration."""


@dataclass(frozen=True)
class VerifierConfig:
    mode: str = "hidden_state"
    tap_layer: int = 3                 # hidden_state mode only
    in_dim: int = 64                   # feature channel width entering the connector
    connector_hidden: int = 128
    scorer_dim: int = 64
    scorer_blocks: int = 2
    encoder_depth: int = 2             # pixel_reencode stand-in encoder
    encoder_dim: int = 64

    def validate(self) -> None:
        if self.mode not in MODES:
            raise VerifierConfigError(f"unknown mode {self.mode!r}")
        if self.mode == "pixel_reencode" and self.encoder_depth < 1:
            raise VerifierConfigError("pixel_reencode needs encoder_depth >= 1")
        if self.mode == "pixel_reencode" and self.in_dim != self.encoder_dim:
            raise VerifierConfigError("pixel mode feeds encoder output to the connector")

    @property
    def requires_full_run(self) -> bool:
        return self.mode != "hidden_state"


@dataclass
class Score:
    decision: bool            # True <=> "yes"
    value: float              # P(yes) if yes else -P(no); |value| >= 0.5


def _block_param_names(prefix: str) -> list[str]:
    return [f"{prefix}.{f}" for f in _BLOCK_FIELDS]


def block_view(params: dict[str, np.ndarray], prefix: str) -> BlockWeights:
    return BlockWeights(*(params[n] for n in _block_param_names(prefix)))


def init_verifier(config: VerifierConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Fresh parameter dict: trainable stack plus frozen auxiliaries."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    d = config.scorer_dim
    p: dict[str, np.ndarray] = {}

    def put_block(prefix: str, width: int, std: float):
        from .numcore import init_block_weights
        bw = init_block_weights(rng, width, weight_std=std)
        for name, f in zip(_block_param_names(prefix), _BLOCK_FIELDS):
            p[name] = getattr(bw, f)

    p["connector.w1"] = rng.standard_normal((config.in_dim, config.connector_hidden)) * 0.05
    p["connector.b1"] = np.zeros(config.connector_hidden)
    p["connector.w2"] = rng.standard_normal((config.connector_hidden, d)) * 0.05
    p["connector.b2"] = np.zeros(d)
    p["prompt_embed.table"] = rng.standard_normal((scenes.VOCAB_SIZE, d)) * 0.5
    p["segment.features"] = rng.standard_normal(d) * 0.1
    p["segment.prompt"] = rng.standard_normal(d) * 0.1
    for i in range(config.scorer_blocks):
        put_block(f"scorer.block{i}", d, 0.05)
    p["head.w"] = rng.standard_normal((d, 2)) * 0.05
    p["head.b"] = np.zeros(2)
    # frozen random readouts used only by the alignment stage
    for k, size in enumerate(scenes.ALIGNMENT_SLOT_SIZES):
        p[f"align.slot{k}.w"] = rng.standard_normal((d, size)) * 0.3
    if config.mode == "pixel_reencode":
        patch_dim = 3 * scenes.PATCH * scenes.PATCH
        p["encoder.patch.w"] = rng.standard_normal((patch_dim, config.encoder_dim)) * 0.1
        p["encoder.patch.b"] = np.zeros(config.encoder_dim)
        for i in range(config.encoder_depth):
            put_block(f"encoder.block{i}", config.encoder_dim, 0.05)
    return p


def trainable_names(params: dict[str, np.ndarray], stage: str) -> list[str]:
    """Freezing policy: alignment tunes the connector only; fine-tuning the
    connector plus the whole scorer stack. Encoder and alignment readouts
    stay frozen always."""
    if stage == "alignment":
        keep = ("connector.",)
    elif stage == "finetune":
        keep = ("connector.", "scorer.", "head.", "prompt_embed.", "segment.")
    else:
        raise ValueError(f"unknown stage {stage!r}")
    return sorted(n for n in params if n.startswith(keep))


# ------------------------------------------------------------- features

def normalize_metered(features: np.ndarray, stats: scenes.FeatureStats,
                      ctx: MeterContext | None) -> np.ndarray:
    """scenes.normalize with its arithmetic charged (2 FLOPs/element plus
    the per-channel inverse-std preparation)."""
    if ctx is not None:
        ctx.add_flops(2 * features.size + stats.mean.shape[-1])
    return scenes.normalize(features, stats)


def patchify(pixels: np.ndarray) -> np.ndarray:
    """[G, G, 3] image -> [cells, PATCH*PATCH*3] rows (data movement only)."""
    g, patch = scenes.IMAGE_SIZE, scenes.PATCH
    cells = g // patch
    x = pixels.reshape(cells, patch, cells, patch, 3)
    return x.transpose(0, 2, 1, 3, 4).reshape(cells * cells, patch * patch * 3)


def encode_pixels(params: dict[str, np.ndarray], config: VerifierConfig,
                  pixels: np.ndarray, ctx: MeterContext | None) -> np.ndarray:
    """Frozen stand-in visual encoder: patch projection + attention blocks."""
    x = linear(Tensor(patchify(pixels)), params["encoder.patch.w"],
               params["encoder.patch.b"], ctx)
    for i in range(config.encoder_depth):
        x = attention_block(x, block_view(params, f"encoder.block{i}"), ctx)
    return x.data


def extract_features(gen: toygen.Generator, state: toygen.GeneratorState,
                     config: VerifierConfig, stats: scenes.FeatureStats | None,
                     ctx: MeterContext | None,
                     params: dict[str, np.ndarray] | None = None,
                     image: toygen.RenderedImage | None = None) -> np.ndarray:
    """Mode-appropriate candidate features, with the pathway's cost metered."""
    config.validate()
    if config.mode == "hidden_state":
        feats = toygen.tap_hidden_features(state)
        if stats is not None:
            feats = normalize_metered(feats, stats, ctx)
        return feats
    if not state.completed:
        raise toygen.StateCompletionError(
            f"{config.mode} verification needs a completed generation")
    if config.mode == "ae_latent":
        return toygen.export_ae_latent(state, ctx).data
    if image is None:
        image = toygen.decode_latent(gen, state.z0, ctx)
    return encode_pixels(params, config, image.pixels.data, ctx)


# ------------------------------------------------------------- forward

def scorer_forward(params: dict[str, np.ndarray], config: VerifierConfig,
                   features: np.ndarray, prompt_ids: np.ndarray,
                   ctx: MeterContext | None = None,
                   cache: dict | None = None) -> np.ndarray:
    """Connector + scorer forward pass; returns the 2 [yes, no] logits.

    With ``cache`` supplied, intermediates are recorded for the training
    module's hand-derived backward pass.
    """
    f = Tensor(np.asarray(features))
    if f.shape[-1] != params["connector.w1"].shape[0]:
        raise VerifierConfigError(
            f"feature width {f.shape[-1]} does not match connector input "
            f"{params['connector.w1'].shape[0]}")
    c_pre = linear(f, params["connector.w1"], params["connector.b1"], ctx)
    c_act = gelu(c_pre, ctx)
    projected = linear(c_act, params["connector.w2"], params["connector.b2"], ctx)
    proj_seg = Tensor(projected.data + params["segment.features"])
    if ctx is not None:
        ctx.add_flops(proj_seg.size)

    prompt_tok = Tensor(params["prompt_embed.table"][prompt_ids] + params["segment.prompt"])
    if ctx is not None:
        ctx.add_flops(prompt_tok.size)

    seq = concat_rows(proj_seg, prompt_tok, ctx)
    block_caches: list[dict] = []
    x = seq
    for i in range(config.scorer_blocks):
        bc: dict | None = {} if cache is not None else None
        x = attention_block(x, block_view(params, f"scorer.block{i}"), ctx, cache=bc)
        if cache is not None:
            bc["x_in"] = seq.data if i == 0 else block_caches[-1]["x_out"]
            bc["x_out"] = x.data
            block_caches.append(bc)
    pooled = mean_pool(x, ctx)
    logits = linear(Tensor(pooled.data[None, :]), params["head.w"], params["head.b"], ctx)

    if cache is not None:
        cache.update(features=np.asarray(features), c_pre=c_pre.data, c_act=c_act.data,
                     projected=projected.data, prompt_ids=np.asarray(prompt_ids),
                     seq=seq.data, blocks=block_caches, seq_out=x.data,
                     pooled=pooled.data, logits=logits.data[0])
    return logits.data[0]


def probabilities(logits: np.ndarray) -> np.ndarray:
    """Stable 2-class softmax in float64."""
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def score_from_logits(logits: np.ndarray) -> Score:
    p = probabilities(np.asarray(logits, dtype=np.float64))
    decision = bool(p[0] >= p[1])
    value = float(p[0]) if decision else float(-p[1])
    return Score(decision=decision, value=value)


def score(params: dict[str, np.ndarray], config: VerifierConfig,
          features: np.ndarray, prompt_ids: np.ndarray,
          ctx: MeterContext | None = None) -> Score:
    """Forward pass, softmax over the 2 logits, greedy decision."""
    logits = scorer_forward(params, config, features, prompt_ids, ctx)
    if ctx is not None:
        ctx.add_flops(2 * 5)  # softmax over the two logits
    return score_from_logits(logits)


# ------------------------------------------------------------- selection

def select_best(scores: list[Score]) -> int:
    """Argmax over continuous value; ties broken toward the lowest index."""
    if not scores:
        raise ValueError("select_best needs a non-empty score list")
    return int(np.argmax([s.value for s in scores]))


def select_random_positive(scores: list[Score], seed: int) -> int:
    """Uniform choice among yes-decisions; uniform over all if none."""
    if not scores:
        raise ValueError("select_random_positive needs a non-empty score list")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    positives = [i for i, s in enumerate(scores) if s.decision]
    pool = positives if positives else list(range(len(scores)))
    return int(pool[rng.integers(len(pool))])


# ------------------------------------------------------------- checkpoints

CHECKPOINT_SCHEMA = 1


def save_checkpoint(prefix: str | Path, params: dict[str, np.ndarray],
                    config: VerifierConfig, stats: scenes.FeatureStats | None,
                    meta: dict | None = None) -> tuple[Path, Path]:
    """Write <prefix>.json header plus <prefix>.bin of named little-endian
    tensors; normalization statistics ride along as stats.* entries."""
    prefix = Path(prefix)
    arrays = dict(params)
    stats_ref = None
    if stats is not None:
        arrays["stats.mean"] = np.asarray(stats.mean, dtype=np.float64)
        arrays["stats.variance"] = np.asarray(stats.variance, dtype=np.float64)
        stats_ref = {"sample_count": int(stats.sample_count)}
    entries = []
    offset = 0
    blob = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype == np.float32:
            dtype = "<f4"
        else:
            arr = arr.astype(np.float64)
            dtype = "<f8"
        raw = arr.astype(dtype).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blob.extend(raw)
        offset += len(raw)
    header = {
        "schema": CHECKPOINT_SCHEMA,
        "mode": config.mode,
        "config": asdict(config),
        "stats_ref": stats_ref,
        "params": entries,
        "meta": meta or {},
    }
    json_path = prefix.with_suffix(".json")
    bin_path = prefix.with_suffix(".bin")
    json_path.write_text(json.dumps(header, indent=1, sort_keys=True))
    bin_path.write_bytes(bytes(blob))
    return json_path, bin_path


def load_checkpoint(prefix: str | Path):
    """Inverse of save_checkpoint; returns (params, config, stats, meta)."""
    prefix = Path(prefix)
    header = json.loads(prefix.with_suffix(".json").read_text())
    if header["schema"] != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {header['schema']}")
    blob = prefix.with_suffix(".bin").read_bytes()
    arrays = {}
    for e in header["params"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
    stats = None
    if header["stats_ref"] is not None:
        stats = scenes.FeatureStats(
            mean=arrays.pop("stats.mean"), variance=arrays.pop("stats.variance"),
            sample_count=header["stats_ref"]["sample_count"])
    config = VerifierConfig(**header["config"])
    return arrays, config, stats, header["meta"]
