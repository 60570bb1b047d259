"""Two-frame crowd network: density, localization and identity embeddings.

A shared four-group convolutional backbone reads the current and the
previous frame.  All four feature scales are stacked at quarter extent,
where a deformable convolution warps the previous-frame stack toward the
current one using predicted offsets.  The warped summary is redistributed
to every scale, gated by spatial attention, and fused coarse to fine into
density and localization pyramids.  The finest head adds channel
attention; a separate 3x3 projection of the finest backbone features
yields per-pixel association embeddings.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .groundtruth import heads_by_frame, multiscale_targets
from .groundtruth import augment as augment_pair
from .tensorcore import Tensor
from .tensorcore.optim import AdamState, LrSchedule, NonFiniteGradient

__all__ = [
    "ModelConfig", "LossWeights", "TrainSettings", "ForwardOutput",
    "STANet", "init_params", "parameter_count", "config_from_dict",
    "map_loss", "association_loss", "combine_losses", "total_loss",
    "TrainingDiverged", "train", "infer", "extract_embeddings",
]

N_SCALES = 4


@dataclass(frozen=True)
class ModelConfig:
    """Architecture switches; extents must divide by 8 at the input."""

    in_channels: int = 3
    channels: tuple = (16, 32, 48, 64)
    embed_dim: int = 16
    tau: int = 1
    sigma_loc: float = 3.0
    use_multiscale: bool = True
    use_localization_head: bool = True
    use_association_head: bool = True
    use_attention: bool = True
    init_scheme: str = "scaled"

    def __post_init__(self):
        if len(self.channels) != N_SCALES:
            raise ValueError(f"need {N_SCALES} backbone channel counts")
        if self.tau < 1:
            raise ValueError("tau must be at least 1")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be positive")
        if min(self.channels) < 4:
            raise ValueError("backbone channels must be at least 4")
        if self.init_scheme not in ("scaled", "fixed"):
            raise ValueError("init_scheme must be 'scaled' or 'fixed'")

    @property
    def final_channels(self) -> int:
        return self.channels[0] if self.use_multiscale else self.channels[-1]


def config_from_dict(doc: dict) -> ModelConfig:
    doc = dict(doc)
    if "channels" in doc:
        doc["channels"] = tuple(doc["channels"])
    return ModelConfig(**doc)


@dataclass(frozen=True)
class LossWeights:
    """Objective mix and the per-scale map weights, coarse to fine."""

    lam_den: float = 1.0
    lam_loc: float = 1e-4
    lam_ass: float = 10.0
    lam_cnt: float = 0.0
    omega: tuple = (0.0125, 0.125, 0.5, 0.5)
    alpha: float = 0.2


# ---------------------------------------------------------------------------
# parameters


def _parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple]]:
    """Fixed creation order so seeded initialization is reproducible."""
    g = config.channels
    stack = sum(g)
    temporal = g[-1]
    shapes: list[tuple[str, tuple]] = []

    def conv(name, out_c, in_c, k):
        shapes.append((f"{name}.w", (out_c, in_c, k, k)))
        shapes.append((f"{name}.b", (1, out_c, 1, 1)))

    prev = config.in_channels
    for i, width in enumerate(g, start=1):
        conv(f"backbone.g{i}.c1", width, prev, 3)
        conv(f"backbone.g{i}.c2", width, width, 3)
        prev = width

    conv("temporal.offsets", 2 * 3 * 3, 2 * stack, 3)
    conv("temporal.merge", temporal, stack, 3)

    scales = range(1, N_SCALES + 1) if config.use_multiscale else (1,)
    for s in scales:
        branch_in = g[N_SCALES - s] + temporal
        if config.use_attention:
            conv(f"scale{s}.gate", 1, 2, 7)
        conv(f"scale{s}.compress", g[N_SCALES - s], branch_in, 1)

    if config.use_multiscale:
        for s in range(2, N_SCALES + 1):
            conv(f"fuse.s{s}", g[N_SCALES - s],
                 g[N_SCALES - s + 1] + g[N_SCALES - s], 3)
        for s in (1, 2, 3):
            conv(f"heads.den.s{s}", 1, g[N_SCALES - s], 1)
            if config.use_localization_head:
                conv(f"heads.loc.s{s}", 1, g[N_SCALES - s], 1)

    fc = config.final_channels
    if config.use_attention:
        conv("final.ca.fc1", max(fc // 4, 1), fc, 1)
        conv("final.ca.fc2", fc, max(fc // 4, 1), 1)
        conv("final.gate", 1, 2, 7)
    conv("final.den", 1, fc, 3)
    if config.use_localization_head:
        conv("final.loc", 1, fc, 3)
    if config.use_association_head:
        conv("assoc.embed", config.embed_dim, g[0], 3)
    return shapes


def init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Gaussian weights, zero biases, all trainable.

    The default "scaled" scheme draws each kernel from N(0, 2 / fan_in),
    which keeps activation magnitudes roughly constant through the stack;
    without it, deep stacks of small fixed-variance kernels attenuate the
    input signal below anything a desk-scale run can recover.  "fixed"
    keeps the flat N(0, 0.01^2) draw.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in _parameter_shapes(config):
        if name.endswith(".b"):
            data = np.zeros(shape)
        elif config.init_scheme == "fixed":
            data = rng.normal(0.0, 0.01, size=shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(int(np.prod(p.data.shape)) for p in params.values())


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class ForwardOutput:
    """Pyramids run coarse to fine; absent heads are None."""

    densities: list
    localizations: list | None
    embedding: Tensor | None
    embedding_prev: Tensor | None
    attention: dict


class STANet:
    """Pure forward wrapper around a parameter dict."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def _conv(self, name, x, **kw):
        return tc.conv2d(x, self.params[f"{name}.w"],
                         self.params[f"{name}.b"], **kw)

    def _backbone(self, x: Tensor) -> list[Tensor]:
        feats = []
        h = x
        for i in range(1, N_SCALES + 1):
            h = tc.relu(self._conv(f"backbone.g{i}.c1", h, padding=1))
            h = tc.relu(self._conv(f"backbone.g{i}.c2", h, padding=1))
            feats.append(h)
            if i < N_SCALES:
                h = tc.maxpool2d(h)
        return feats

    @staticmethod
    def _quarter_stack(feats: list[Tensor]) -> Tensor:
        g1, g2, g3, g4 = feats
        return tc.concat([
            tc.maxpool2d(tc.maxpool2d(g1)),
            tc.maxpool2d(g2),
            g3,
            tc.upsample_bilinear2x(g4),
        ])

    def _temporal_merge(self, cur_stack: Tensor, prev_stack: Tensor):
        offsets = self._conv("temporal.offsets",
                             tc.concat([cur_stack, prev_stack]), padding=1)
        warped = tc.deform_conv2d(
            prev_stack, self.params["temporal.merge.w"], offsets,
            self.params["temporal.merge.b"], padding=1)
        return tc.relu(warped), offsets

    def _spatial_gate(self, name, x: Tensor):
        summary = tc.concat([tc.channel_mean(x), tc.channel_max(x)])
        gate = tc.sigmoid(self._conv(name, summary, padding=3))
        return tc.mul(x, gate), gate

    def _scale_branch(self, s: int, backbone_feat: Tensor,
                      temporal_feat: Tensor, attention: dict) -> Tensor:
        x = tc.concat([backbone_feat, temporal_feat])
        if self.config.use_attention:
            x, gate = self._spatial_gate(f"scale{s}.gate", x)
            attention[f"scale{s}"] = gate
        return tc.relu(self._conv(f"scale{s}.compress", x))

    def _final_head(self, x: Tensor, attention: dict):
        cfg = self.config
        if cfg.use_attention:
            avg = tc.global_avg_pool(x)
            mx = tc.global_max_pool(x)

            def mlp(v):
                hidden = tc.relu(tc.fully_connected(
                    v, self.params["final.ca.fc1.w"],
                    self.params["final.ca.fc1.b"]))
                return tc.fully_connected(
                    hidden, self.params["final.ca.fc2.w"],
                    self.params["final.ca.fc2.b"])

            cgate = tc.sigmoid(tc.add(mlp(avg), mlp(mx)))
            x = tc.mul(x, cgate)
            attention["channel"] = cgate
            x, sgate = self._spatial_gate("final.gate", x)
            attention["spatial"] = sgate
        den = self._conv("final.den", x, padding=1)
        loc = None
        if cfg.use_localization_head:
            loc = self._conv("final.loc", x, padding=1)
        return den, loc

    def forward(self, cur: Tensor, prev: Tensor) -> ForwardOutput:
        cfg = self.config
        n, c, h, w = cur.data.shape
        if c != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels")
        if h % 8 or w % 8:
            raise ValueError(f"input extents {w}x{h} must divide by 8")
        if prev.data.shape != cur.data.shape:
            raise ValueError("current and previous frames must match")

        cur_feats = self._backbone(cur)
        prev_feats = self._backbone(prev)
        temporal, offsets = self._temporal_merge(
            self._quarter_stack(cur_feats), self._quarter_stack(prev_feats))
        attention: dict = {"offsets": offsets}

        up = tc.upsample_bilinear2x
        if cfg.use_multiscale:
            t2 = temporal
            per_scale = [tc.maxpool2d(temporal), t2, up(t2), up(up(t2))]
            comp = [
                self._scale_branch(s, cur_feats[N_SCALES - s],
                                   per_scale[s - 1], attention)
                for s in range(1, N_SCALES + 1)
            ]
            fused = [comp[0]]
            for s in range(2, N_SCALES + 1):
                merged = tc.concat([up(fused[-1]), comp[s - 1]])
                fused.append(tc.relu(self._conv(f"fuse.s{s}", merged,
                                                padding=1)))
            densities, locs = [], []
            for s in (1, 2, 3):
                densities.append(self._conv(f"heads.den.s{s}", fused[s - 1]))
                if cfg.use_localization_head:
                    locs.append(self._conv(f"heads.loc.s{s}", fused[s - 1]))
            den_fine, loc_fine = self._final_head(fused[-1], attention)
            densities.append(den_fine)
            if cfg.use_localization_head:
                locs.append(loc_fine)
            localizations = locs if cfg.use_localization_head else None
        else:
            coarse = self._scale_branch(1, cur_feats[-1],
                                        tc.maxpool2d(temporal), attention)
            fine = up(up(up(coarse)))
            den_fine, loc_fine = self._final_head(fine, attention)
            densities = [den_fine]
            localizations = [loc_fine] if cfg.use_localization_head else None

        embedding = embedding_prev = None
        if cfg.use_association_head:
            embedding = self._conv("assoc.embed", cur_feats[0], padding=1)
            embedding_prev = self._conv("assoc.embed", prev_feats[0],
                                        padding=1)
        return ForwardOutput(densities=densities, localizations=localizations,
                             embedding=embedding,
                             embedding_prev=embedding_prev,
                             attention=attention)


# ---------------------------------------------------------------------------
# losses


def map_loss(preds: list, targets: list, omega) -> Tensor:
    """Weighted sum of per-scale summed squared residuals."""
    if len(preds) != len(targets) or len(preds) != len(omega):
        raise ValueError("one prediction, target and weight per scale")
    total = None
    for pred, target, wgt in zip(preds, targets, omega):
        t = np.asarray(target, dtype=np.float64)
        if t.ndim == 2:
            t = t[None, None]
        diff = tc.sub(pred, tc.constant(t))
        term = tc.scale(tc.sum_all(tc.mul(diff, diff)), float(wgt))
        total = term if total is None else tc.add(total, term)
    return total


def _sample_normalized(embed_map: Tensor, heads) -> Tensor:
    pts = [(x, y) for x, y, _ in heads]
    return tc.l2_normalize(tc.bilinear_sample(embed_map, pts))


def association_loss(embed_cur: Tensor, embed_prev: Tensor, heads_cur,
                     heads_prev, alpha: float = 0.2):
    """Batch-hard triplet margin over identities visible in both frames.

    Anchors live in the current frame, positives are the same identity in
    the previous frame, and the hardest negative is searched over every
    other head of either frame.  The negative is chosen on detached
    values; only the selected pairs join the graph.  Returns the loss and
    the anchor count, which is zero when no valid triplet exists.
    """
    heads_cur, heads_prev = list(heads_cur), list(heads_prev)
    idents_cur = {h[2]: i for i, h in enumerate(heads_cur)}
    idents_prev = {h[2]: i for i, h in enumerate(heads_prev)}
    anchors = sorted(set(idents_cur) & set(idents_prev))
    zero = tc.constant(np.zeros((1, 1, 1, 1)))
    if not anchors:
        return zero, 0

    emb_c = _sample_normalized(embed_cur, heads_cur)
    emb_p = _sample_normalized(embed_prev, heads_prev)
    flat_c = emb_c.data.reshape(len(heads_cur), -1)
    flat_p = emb_p.data.reshape(len(heads_prev), -1)

    total = None
    n_anchors = 0
    for ident in anchors:
        ai, pi = idents_cur[ident], idents_prev[ident]
        candidates = [(flat_c[i], emb_c, i)
                      for i, h in enumerate(heads_cur) if h[2] != ident]
        candidates += [(flat_p[i], emb_p, i)
                       for i, h in enumerate(heads_prev) if h[2] != ident]
        if not candidates:
            continue
        a_vec = flat_c[ai]
        dists = [float(np.sum((a_vec - vec) ** 2)) for vec, _, _ in candidates]
        _, src, ni = candidates[int(np.argmin(dists))]

        anchor = tc.take_batch(emb_c, ai)
        dp = tc.sub(anchor, tc.take_batch(emb_p, pi))
        dn = tc.sub(anchor, tc.take_batch(src, ni))
        d_ap = tc.sum_all(tc.mul(dp, dp))
        d_an = tc.sum_all(tc.mul(dn, dn))
        term = tc.relu(tc.shift(tc.sub(d_ap, d_an), float(alpha)))
        total = term if total is None else tc.add(total, term)
        n_anchors += 1
    if n_anchors == 0:
        return zero, 0
    return tc.scale(total, 1.0 / n_anchors), n_anchors


def combine_losses(parts: list, weights: LossWeights) -> Tensor:
    """Half the per-pair mean of the weighted objective terms."""
    if not parts:
        raise ValueError("no loss parts to combine")
    total = None
    for p in parts:
        term = tc.scale(p["den"], weights.lam_den)
        if p.get("loc") is not None:
            term = tc.add(term, tc.scale(p["loc"], weights.lam_loc))
        if p.get("ass") is not None:
            term = tc.add(term, tc.scale(p["ass"], weights.lam_ass))
        if p.get("cnt") is not None:
            term = tc.add(term, tc.scale(p["cnt"], weights.lam_cnt))
        total = term if total is None else tc.add(total, term)
    return tc.scale(total, 1.0 / (2.0 * len(parts)))


def count_consistency_loss(preds: list, targets: list, omega) -> Tensor:
    """Squared gap between predicted and true mass, summed over scales.

    Summed-squared map residuals barely punish a small uniform offset,
    which integrates into a large count error; this term penalizes the
    integral directly.
    """
    total = None
    for pred, target, wgt in zip(preds, targets, omega):
        mass = float(np.sum(target))
        gap = tc.shift(tc.sum_all(pred), -mass)
        term = tc.scale(tc.mul(gap, gap), float(wgt))
        total = term if total is None else tc.add(total, term)
    return total


def total_loss(output: ForwardOutput, den_targets, loc_targets, heads_cur,
               heads_prev, weights: LossWeights, config: ModelConfig):
    """Single-pair objective plus detached component values for logging."""
    omega = weights.omega[-len(output.densities):]
    parts: dict = {"den": map_loss(output.densities, den_targets, omega)}
    if weights.lam_cnt != 0.0:
        parts["cnt"] = count_consistency_loss(output.densities, den_targets,
                                              omega)
    if config.use_localization_head and output.localizations is not None:
        parts["loc"] = map_loss(output.localizations, loc_targets, omega)
    if (config.use_association_head and weights.lam_ass != 0.0
            and output.embedding is not None):
        ass, n_anchors = association_loss(
            output.embedding, output.embedding_prev, heads_cur, heads_prev,
            alpha=weights.alpha)
        if n_anchors:
            parts["ass"] = ass
    loss = combine_losses([parts], weights)
    detail = {key: float(tensor.item()) for key, tensor in parts.items()}
    return loss, detail


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    """Raised when the objective or a gradient stops being finite."""


@dataclass(frozen=True)
class TrainSettings:
    crop: tuple | None = None      # (width, height) patch, None trains full
    flip_prob: float = 0.5
    pairs_per_sequence: int = 4
    # density target kernels: geometry-adaptive by default; sparse scenes
    # condition far better with a fixed width near sigma_loc
    adaptive_sigma: bool = True
    sigma_fixed: float = 4.0
    log_name: str = "train_log.csv"
    checkpoint_name: str = "checkpoint.npz"


def _write_log(path: Path, history: list):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_total", "loss_den", "loss_loc",
                         "loss_ass", "loss_cnt", "lr"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["loss_total"]),
                             repr(row["loss_den"]), repr(row["loss_loc"]),
                             repr(row["loss_ass"]), repr(row["loss_cnt"]),
                             repr(row["lr"])])


def _training_pair(seq, heads, t, tau):
    prev_t = max(t - tau, 0)
    return ([np.asarray(seq.frames[prev_t]), np.asarray(seq.frames[t])],
            [list(heads[prev_t]), list(heads[t])])


def train(sequences, config: ModelConfig, weights: LossWeights,
          schedule: LrSchedule, seed: int, out_dir,
          settings: TrainSettings = TrainSettings()):
    """Adam over random augmented frame pairs; one step per pair.

    Writes a per-epoch CSV log and refreshes the checkpoint after every
    epoch.  A non-finite loss or gradient aborts with TrainingDiverged,
    leaving the last completed epoch's checkpoint in place.
    """
    if not sequences:
        raise ValueError("no training sequences")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ss_init, ss_data = np.random.SeedSequence(seed).spawn(2)
    params = init_params(config, seed=int(ss_init.generate_state(1)[0]))
    rng = np.random.default_rng(ss_data)
    model = STANet(config, params)
    state = AdamState()
    history: list[dict] = []

    per_seq_heads = [
        heads_by_frame(s.annotations, frame_count=s.frames.shape[0])
        for s in sequences
    ]
    checkpoint_meta = {"model": asdict(config), "weights": asdict(weights),
                       "seed": seed}

    for epoch in range(1, schedule.epochs + 1):
        lr = schedule.lr_for_epoch(epoch)
        sums = {"total": 0.0, "den": 0.0, "loc": 0.0, "ass": 0.0,
                "cnt": 0.0}
        n_steps = 0
        for seq, heads in zip(sequences, per_seq_heads):
            n_frames = seq.frames.shape[0]
            for _ in range(settings.pairs_per_sequence):
                t = int(rng.integers(min(config.tau, n_frames - 1), n_frames)) \
                    if n_frames > 1 else 0
                frames, pair_heads = _training_pair(seq, heads, t, config.tau)
                frames, pair_heads = augment_pair(
                    frames, pair_heads, rng, crop=settings.crop,
                    flip_prob=settings.flip_prob)
                h, w = frames[0].shape[-2:]
                cur_heads, prev_heads = pair_heads[1], pair_heads[0]
                den_t, loc_t = multiscale_targets(
                    [(x, y) for x, y, _ in cur_heads], w, h,
                    n_scales=N_SCALES, sigma_loc=config.sigma_loc,
                    adaptive=settings.adaptive_sigma,
                    sigma_fixed=settings.sigma_fixed)
                if not config.use_multiscale:
                    den_t, loc_t = den_t[-1:], loc_t[-1:]

                cur = tc.constant(frames[1][None])
                prev = tc.constant(frames[0][None])
                out = model.forward(cur, prev)
                loss, detail = total_loss(out, den_t, loc_t, cur_heads,
                                          prev_heads, weights, config)
                value = float(loss.item())
                if not math.isfinite(value):
                    _write_log(out_dir / settings.log_name, history)
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}")
                loss.backward()
                try:
                    tc.adam_step(params, tc.parameter_grads(params), state, lr)
                except NonFiniteGradient as exc:
                    _write_log(out_dir / settings.log_name, history)
                    raise TrainingDiverged(str(exc)) from exc
                for p in params.values():
                    p.zero_grad()
                sums["total"] += value
                sums["den"] += detail.get("den", 0.0)
                sums["loc"] += detail.get("loc", 0.0)
                sums["ass"] += detail.get("ass", 0.0)
                sums["cnt"] += detail.get("cnt", 0.0)
                n_steps += 1
        history.append({
            "epoch": epoch,
            "loss_total": sums["total"] / n_steps,
            "loss_den": sums["den"] / n_steps,
            "loss_loc": sums["loc"] / n_steps,
            "loss_ass": sums["ass"] / n_steps,
            "loss_cnt": sums["cnt"] / n_steps,
            "lr": lr,
        })
        _write_log(out_dir / settings.log_name, history)
        tc.save_checkpoint(out_dir / settings.checkpoint_name, params,
                           config={**checkpoint_meta, "epoch": epoch})
    return params, history


# ---------------------------------------------------------------------------
# inference


@dataclass
class InferenceResult:
    densities: np.ndarray        # (T, H, W)
    localizations: np.ndarray | None
    embeddings: np.ndarray | None   # (T, E, H, W)
    counts: np.ndarray           # (T,)


def infer(params: dict, config: ModelConfig, frames: np.ndarray,
          tau: int | None = None) -> InferenceResult:
    """Run every frame against its reference frame max(t - tau, 0).

    Localization maps are clipped to [0, 1] when materialized; densities
    are returned raw so the count integral is untouched.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4:
        raise ValueError("expected frames shaped (t, c, h, w)")
    tau = config.tau if tau is None else tau
    model = STANet(config, params)
    dens, locs, embs = [], [], []
    for t in range(frames.shape[0]):
        prev_t = max(t - tau, 0)
        out = model.forward(tc.constant(frames[t][None]),
                            tc.constant(frames[prev_t][None]))
        dens.append(out.densities[-1].data[0, 0])
        if out.localizations is not None:
            locs.append(np.clip(out.localizations[-1].data[0, 0], 0.0, 1.0))
        if out.embedding is not None:
            embs.append(out.embedding.data[0])
    densities = np.stack(dens)
    return InferenceResult(
        densities=densities,
        localizations=np.stack(locs) if locs else None,
        embeddings=np.stack(embs) if embs else None,
        counts=densities.sum(axis=(1, 2)),
    )


def extract_embeddings(embed_map: np.ndarray, points) -> np.ndarray:
    """Bilinear per-point embeddings, unit-normalized; zeros stay zero."""
    embed_map = np.asarray(embed_map, dtype=np.float64)
    if embed_map.ndim != 3:
        raise ValueError("expected an (e, h, w) embedding map")
    points = list(points)
    _, h, w = embed_map.shape
    for i, (x, y) in enumerate(points):
        if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
            raise ValueError(f"point {i} at ({x}, {y}) outside the map")
    if not points:
        return np.zeros((0, embed_map.shape[0]))
    sampled = tc.bilinear_sample(tc.constant(embed_map[None]), points)
    vecs = sampled.data.reshape(len(points), -1)
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    return vecs / safe
