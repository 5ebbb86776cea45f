"""Gradient-variance experiments on a seeded toy attention stack.

The model is embedding -> [causal multi-head attention + residual] x layers
-> unembedding -> mean next-token cross-entropy. No MLP blocks and no layer
norm: the gradient path is deliberately dominated by attention, the object
under study, so measured exponents are expected to differ somewhat from
full-transformer values. Dense and stochastized backward passes share the
identical forward computation.

Sequences default to iid uniform tokens. `topic_scale` optionally draws
each sequence from its own random token distribution, giving sequences O(1)
composition differences the way real corpus documents differ. That puts a
floor under the across-sequence baseline variance while per-entry mask
noise still averages out as 1/n, so the relative increase rho rises (once
n is past the everything-retained regime) and then falls with n. Uniform
tokens lack the floor and rho keeps climbing toward a plateau instead; the
n-sweep experiment therefore uses topic-structured sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from susbp.attention_core import AttnInput, attn_backward_dense, attn_forward
from susbp.numerics import Mat, PowerLawFit, RngStream, fit_power_law
from susbp.spread_analysis import write_weight_dump
from susbp.sus_backprop import attn_backward_sparse, sample_mask

DEFAULT_TOPIC_SCALE = 0.0


@dataclass(frozen=True)
class ToyModelConfig:
    """Shape and seeding of the toy stack; tau=None means 1/sqrt(d_head)."""

    vocab: int = 128
    d_model: int = 64
    heads: int = 4
    d_head: int = 16
    layers: int = 2
    n: int = 256
    tau: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("vocab", "d_model", "heads", "d_head", "layers", "n"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.heads * self.d_head != self.d_model:
            raise ValueError(
                f"heads * d_head must equal d_model "
                f"({self.heads} * {self.d_head} != {self.d_model})"
            )

    def resolved_tau(self) -> float:
        return self.tau if self.tau is not None else 1.0 / math.sqrt(self.d_head)


@dataclass(frozen=True)
class ToyModelParams:
    """Seeded Gaussian parameters; a deterministic function of the config seed."""

    cfg: ToyModelConfig
    embed: Mat       # (vocab, d_model)
    wq: np.ndarray   # (layers, heads, d_model, d_head)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray   # (layers, d_model, d_model)
    unembed: Mat     # (d_model, vocab)

    def flat_size(self) -> int:
        return (
            self.embed.size + self.wq.size + self.wk.size + self.wv.size
            + self.wo.size + self.unembed.size
        )


@dataclass(frozen=True)
class MaskUsage:
    """Retained-entry totals accumulated over one or more sus backward passes."""

    nnz: int = 0
    rows: int = 0

    def merged(self, other: "MaskUsage") -> "MaskUsage":
        return MaskUsage(self.nnz + other.nnz, self.rows + other.rows)

    @property
    def mean_retained_per_row(self) -> float:
        return self.nnz / self.rows if self.rows else 0.0


@dataclass(frozen=True)
class VarianceReport:
    """Variance measurements for one (c, n) cell with jackknife errors."""

    c: float
    n: int
    xi: float
    kappa: float
    kappa_se: float
    sigma: float
    sigma_se: float
    sigma0: float
    sigma0_se: float
    rho: float
    rho_se: float
    nnz_mean: float


def build_toy_model(cfg: ToyModelConfig) -> ToyModelParams:
    """Draw all parameters from seeded Gaussians at scale 1/sqrt(fan-in)."""
    gen = RngStream(cfg.seed, stream_id=11).generator()
    d, dh = cfg.d_model, cfg.d_head
    embed = gen.normal(size=(cfg.vocab, d))
    wq = gen.normal(scale=1.0 / math.sqrt(d), size=(cfg.layers, cfg.heads, d, dh))
    wk = gen.normal(scale=1.0 / math.sqrt(d), size=(cfg.layers, cfg.heads, d, dh))
    wv = gen.normal(scale=1.0 / math.sqrt(d), size=(cfg.layers, cfg.heads, d, dh))
    wo = gen.normal(scale=1.0 / math.sqrt(d), size=(cfg.layers, d, d))
    unembed = gen.normal(scale=1.0 / math.sqrt(d), size=(d, cfg.vocab))
    return ToyModelParams(
        cfg=cfg, embed=embed, wq=wq, wk=wk, wv=wv, wo=wo, unembed=unembed
    )


def sample_sequences(
    cfg: ToyModelConfig,
    count: int,
    seed: int,
    n: int | None = None,
    topic_scale: float = DEFAULT_TOPIC_SCALE,
) -> np.ndarray:
    """Seeded token sequences; returns (count, n) int64.

    topic_scale=0 (default) gives iid uniform tokens; positive values draw
    each sequence from its own softmax-of-Gaussian token distribution.
    """
    length = cfg.n if n is None else n
    out = np.empty((count, length), dtype=np.int64)
    for s in range(count):
        gen = RngStream(seed, stream_id=0).child(17, length, s).generator()
        if topic_scale > 0.0:
            logits = topic_scale * gen.normal(size=cfg.vocab)
            probs = np.exp(logits - logits.max())
            probs /= probs.sum()
            out[s] = gen.choice(cfg.vocab, size=length, p=probs)
        else:
            out[s] = gen.integers(0, cfg.vocab, size=length)
    return out


def _check_tokens(params: ToyModelParams, tokens: np.ndarray) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.int64)
    if t.ndim != 1:
        raise ValueError("tokens must be a 1-D sequence")
    if np.any(t < 0) or np.any(t >= params.cfg.vocab):
        raise ValueError(f"token id outside [0, {params.cfg.vocab})")
    return t


def _forward(params: ToyModelParams, tokens: np.ndarray):
    """Loss plus the per-layer caches needed for the manual backward."""
    cfg = params.cfg
    tau = cfg.resolved_tau()
    x = params.embed[tokens]
    caches = []
    for layer in range(cfg.layers):
        head_states = []
        concat = np.empty_like(x)
        for h in range(cfg.heads):
            inp = AttnInput(
                q=x @ params.wq[layer, h],
                k=x @ params.wk[layer, h],
                v=x @ params.wv[layer, h],
                tau=tau,
                causal=True,
            )
            state = attn_forward(inp)
            head_states.append((inp, state))
            concat[:, h * cfg.d_head : (h + 1) * cfg.d_head] = state.vbar
        attn_out = concat @ params.wo[layer]
        caches.append((x, head_states, concat))
        x = x + attn_out
    logits = x @ params.unembed
    # stabilized softmax cross-entropy on next-token targets
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    targets = tokens[1:]
    n_pred = targets.size
    loss = -float(log_probs[np.arange(n_pred), targets].mean())
    return loss, x, log_probs, caches


def model_loss(params: ToyModelParams, tokens) -> float:
    """Forward-only scalar loss; identical between dense and sus modes."""
    t = _check_tokens(params, tokens)
    if t.size < 2:
        raise ValueError("need at least 2 tokens for a next-token loss")
    return _forward(params, t)[0]


def model_grad_with_usage(
    params: ToyModelParams,
    tokens,
    mode: str = "dense",
    c: float = 0.0,
    rng: RngStream | None = None,
) -> tuple[np.ndarray, MaskUsage]:
    """Full-stack gradient plus retained-entry accounting (sus mode only).

    mode="dense" uses the exact attention backward; mode="sus" samples a
    fresh mask per (layer, head) from `rng` children and contracts only the
    retained entries. The forward pass is shared verbatim.
    """
    if mode not in ("dense", "sus"):
        raise ValueError(f"mode must be 'dense' or 'sus', got {mode!r}")
    if mode == "sus":
        if c <= 0:
            raise ValueError("sus mode needs a positive retention parameter c")
        if rng is None:
            raise ValueError("sus mode needs an RngStream")
    cfg = params.cfg
    t = _check_tokens(params, tokens)
    if t.size < 2:
        raise ValueError("need at least 2 tokens for a next-token loss")
    _, x_final, log_probs, caches = _forward(params, t)

    n_pred = t.size - 1
    targets = t[1:]
    d_logits = np.exp(log_probs)
    d_logits[np.arange(n_pred), targets] -= 1.0
    d_logits /= n_pred
    d_logits[n_pred:] = 0.0

    g_unembed = x_final.T @ d_logits
    dx = d_logits @ params.unembed.T

    g_embed = np.zeros_like(params.embed)
    g_wq = np.zeros_like(params.wq)
    g_wk = np.zeros_like(params.wk)
    g_wv = np.zeros_like(params.wv)
    g_wo = np.zeros_like(params.wo)
    usage = MaskUsage()

    for layer in reversed(range(cfg.layers)):
        x_in, head_states, concat = caches[layer]
        g_wo[layer] = concat.T @ dx
        d_concat = dx @ params.wo[layer].T
        dx_branch = np.zeros_like(dx)
        for h in range(cfg.heads):
            inp, state = head_states[h]
            d_vbar = d_concat[:, h * cfg.d_head : (h + 1) * cfg.d_head]
            if mode == "dense":
                grads = attn_backward_dense(state, inp, d_vbar)
            else:
                mask = sample_mask(
                    state.w, c, causal=True, rng=rng.child(layer, h)
                )
                usage = usage.merged(MaskUsage(mask.nnz, mask.n))
                grads = attn_backward_sparse(mask, inp, state.vbar, d_vbar)
            g_wq[layer, h] = x_in.T @ grads.dq
            g_wk[layer, h] = x_in.T @ grads.dk
            g_wv[layer, h] = x_in.T @ grads.dv
            dx_branch += (
                grads.dq @ params.wq[layer, h].T
                + grads.dk @ params.wk[layer, h].T
                + grads.dv @ params.wv[layer, h].T
            )
        dx = dx + dx_branch  # residual: identity plus attention branch
    np.add.at(g_embed, t, dx)

    flat = np.concatenate(
        [
            g_embed.ravel(), g_wq.ravel(), g_wk.ravel(),
            g_wv.ravel(), g_wo.ravel(), g_unembed.ravel(),
        ]
    )
    return flat, usage


def model_grad(
    params: ToyModelParams,
    tokens,
    mode: str = "dense",
    c: float = 0.0,
    rng: RngStream | None = None,
) -> np.ndarray:
    """Flat gradient over all parameters (embed, wq, wk, wv, wo, unembed)."""
    return model_grad_with_usage(params, tokens, mode=mode, c=c, rng=rng)[0]


def _jackknife_se(replicates: np.ndarray) -> float:
    reps = np.asarray(replicates, dtype=np.float64)
    s = reps.size
    mean = reps.mean()
    return float(np.sqrt((s - 1) / s * np.sum((reps - mean) ** 2)))


def _variance_from_sums(total: np.ndarray, total_sq: np.ndarray, count: int) -> float:
    mean = total / count
    var = (total_sq - count * mean * mean) / (count - 1)
    return float(np.mean(np.maximum(var, 0.0)))


def _clustered_total_variance(
    per_seq_sum: np.ndarray, per_seq_sq: np.ndarray, k: int
) -> float:
    """Unbiased total variance across (sequence, mask) pairs, K samples each.

    The naive pooled estimator shrinks the between-sequence component by
    (K-1)/(SK-1); the between/within decomposition removes that bias.
    Reduces to the plain pooled estimator at K = 1.
    """
    s = per_seq_sum.shape[0]
    if k == 1:
        return _variance_from_sums(per_seq_sum.sum(axis=0), per_seq_sq.sum(axis=0), s)
    means = per_seq_sum / k
    grand = means.mean(axis=0)
    ms_between = k * np.sum((means - grand) ** 2, axis=0) / (s - 1)
    ms_within = np.sum(per_seq_sq - per_seq_sum**2 / k, axis=0) / (s * (k - 1))
    total_var = ms_between / k + ms_within * (1.0 - 1.0 / k)
    return float(np.mean(np.maximum(total_var, 0.0)))


def estimate_variance(
    params: ToyModelParams,
    sequences: np.ndarray,
    mode: str = "sus",
    c: float = 0.0,
    samples_per_sequence: int = 1,
    base_seed: int = 0,
    dense_grads: np.ndarray | None = None,
) -> VarianceReport:
    """Measure Sigma0, Sigma, rho and retention for one (c, n) cell.

    Sigma0 is the mean component variance of dense per-sequence gradients.
    Sigma is the per-component variance across (sequence, mask sample)
    pairs of sus gradients, one fresh mask stream per pair derived from
    (sequence index, sample index), estimated by the unbiased
    between/within decomposition (the naive pooled estimator shrinks the
    sequence component by (K-1)/(SK-1), which visibly distorts rho when it
    is of order 1/(SK)). Standard errors come from jackknife over
    sequences. `dense_grads` lets a sweep reuse the dense pass across
    same-n cells.
    """
    seqs = np.asarray(sequences)
    if seqs.ndim != 2 or seqs.shape[0] < 2:
        raise ValueError("need at least 2 sequences")
    s_count, n = seqs.shape

    if dense_grads is None:
        dense_grads = np.stack([model_grad(params, seq, mode="dense") for seq in seqs])
    sigma0 = float(np.mean(np.var(dense_grads, axis=0, ddof=1)))

    if mode == "dense":
        sigma0_reps = np.array(
            [
                float(
                    np.mean(np.var(np.delete(dense_grads, i, axis=0), axis=0, ddof=1))
                )
                for i in range(s_count)
            ]
        )
        se0 = _jackknife_se(sigma0_reps)
        return VarianceReport(
            c=0.0, n=n, xi=0.0,
            kappa=0.0, kappa_se=0.0,
            sigma=sigma0, sigma_se=se0,
            sigma0=sigma0, sigma0_se=se0,
            rho=0.0, rho_se=0.0, nnz_mean=0.0,
        )

    if samples_per_sequence < 1:
        raise ValueError("samples_per_sequence must be at least 1")

    dim = params.flat_size()
    per_seq_sum = np.zeros((s_count, dim))
    per_seq_sq = np.zeros((s_count, dim))
    per_seq_usage = [MaskUsage() for _ in range(s_count)]
    for i, seq in enumerate(seqs):
        for k in range(samples_per_sequence):
            stream = RngStream(base_seed, stream_id=0).child(23, i, k)
            flat, usage = model_grad_with_usage(params, seq, mode="sus", c=c, rng=stream)
            per_seq_sum[i] += flat
            per_seq_sq[i] += flat * flat
            per_seq_usage[i] = per_seq_usage[i].merged(usage)

    pairs = s_count * samples_per_sequence
    sigma = _clustered_total_variance(per_seq_sum, per_seq_sq, samples_per_sequence)

    total_usage = MaskUsage()
    for u in per_seq_usage:
        total_usage = total_usage.merged(u)
    nnz_mean = total_usage.mean_retained_per_row
    kappa = nnz_mean / n
    rho = (sigma - sigma0) / sigma0

    # leave-one-sequence-out replicates for every derived statistic
    sigma_reps = np.empty(s_count)
    sigma0_reps = np.empty(s_count)
    kappa_reps = np.empty(s_count)
    rho_reps = np.empty(s_count)
    for i in range(s_count):
        keep = np.arange(s_count) != i
        sigma_reps[i] = _clustered_total_variance(
            per_seq_sum[keep], per_seq_sq[keep], samples_per_sequence
        )
        sigma0_reps[i] = float(
            np.mean(np.var(dense_grads[keep], axis=0, ddof=1))
        )
        u = MaskUsage()
        for j in range(s_count):
            if j != i:
                u = u.merged(per_seq_usage[j])
        kappa_reps[i] = u.mean_retained_per_row / n
        rho_reps[i] = (sigma_reps[i] - sigma0_reps[i]) / sigma0_reps[i]

    return VarianceReport(
        c=float(c), n=n, xi=float(c) / n,
        kappa=kappa, kappa_se=_jackknife_se(kappa_reps),
        sigma=sigma, sigma_se=_jackknife_se(sigma_reps),
        sigma0=sigma0, sigma0_se=_jackknife_se(sigma0_reps),
        rho=rho, rho_se=_jackknife_se(rho_reps),
        nnz_mean=nnz_mean,
    )


@dataclass(frozen=True)
class SweepResult:
    reports: tuple[VarianceReport, ...]
    kappa_fit: PowerLawFit | None
    rho_fit: PowerLawFit | None


def sweep_and_fit(
    cfg: ToyModelConfig,
    cells: list[tuple[float, int]],
    sequences: int,
    samples_per_sequence: int,
    base_seed: int,
    fit: bool = True,
    topic_scale: float = DEFAULT_TOPIC_SCALE,
) -> SweepResult:
    """Run estimate_variance per (c, n) cell, optionally fitting power laws.

    Fits of kappa(xi) and rho(xi) need at least 4 cells varying c at one
    fixed n; dense baselines are computed once per distinct n and shared
    across that n's cells. Results are deterministic in (cfg, cells, seed).
    """
    if not cells:
        raise ValueError("sweep needs at least one (c, n) cell")
    params = build_toy_model(cfg)
    dense_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    reports = []
    for c, n in cells:
        if n not in dense_cache:
            seqs = sample_sequences(cfg, sequences, base_seed, n=n, topic_scale=topic_scale)
            dense = np.stack([model_grad(params, seq, mode="dense") for seq in seqs])
            dense_cache[n] = (seqs, dense)
        seqs, dense = dense_cache[n]
        reports.append(
            estimate_variance(
                params, seqs, mode="sus", c=c,
                samples_per_sequence=samples_per_sequence,
                base_seed=base_seed, dense_grads=dense,
            )
        )

    kappa_fit = rho_fit = None
    if fit:
        by_n: dict[int, list[VarianceReport]] = {}
        for r in reports:
            by_n.setdefault(r.n, []).append(r)
        best = max(by_n.values(), key=len)
        usable = [r for r in best if r.rho > 0 and r.kappa > 0]
        if len(best) < 4 or len({r.c for r in best}) < 4:
            raise ValueError("power-law fit needs at least 4 cells varying c at fixed n")
        if len(usable) < 4:
            raise ValueError("fewer than 4 cells have positive rho; cannot fit")
        xis = np.array([r.xi for r in usable])
        kappa_fit = fit_power_law(xis, np.array([r.kappa for r in usable]))
        rho_fit = fit_power_law(xis, np.array([r.rho for r in usable]))
    return SweepResult(reports=tuple(reports), kappa_fit=kappa_fit, rho_fit=rho_fit)


def dump_mean_attention(
    params: ToyModelParams,
    sequences: np.ndarray,
    out_dir,
    model_name: str = "susbp-toy",
):
    """Average per-(layer, head) attention over sequences and write a dump."""
    cfg = params.cfg
    seqs = np.asarray(sequences)
    if seqs.ndim != 2 or seqs.shape[0] < 1:
        raise ValueError("need at least 1 sequence")
    totals = {
        (l, h): np.zeros((seqs.shape[1], seqs.shape[1]))
        for l in range(cfg.layers)
        for h in range(cfg.heads)
    }
    for seq in seqs:
        _, _, _, caches = _forward(params, _check_tokens(params, seq))
        for l in range(cfg.layers):
            _, head_states, _ = caches[l]
            for h in range(cfg.heads):
                totals[(l, h)] += head_states[h][1].w
    matrices = {key: w / seqs.shape[0] for key, w in totals.items()}
    return write_weight_dump(matrices, model_name, out_dir, sequences_averaged=seqs.shape[0])
