"""Trainable downstream head: attentive statistics pooling, MLP, weighted CE.

Forward and reverse passes are written by hand over padded batch tensors
(B, n_layers, T, dim) and verified against central finite differences; the
quantizers and input features sit upstream of every trainable parameter and
receive no gradient. All math runs in float64 so the gradient checks hold
at tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dataio import N_CLASSES
from .fusion import (
    LAYER_NORM_EPS,
    FusionParams,
    init_fusion_params,
    sigmoid,
    softplus,
)
from .metrics import confusion_matrix, macro_f1

VAR_FLOOR = 1e-8  # keeps the pooling std differentiable at zero variance


@dataclass
class PreparedUtterance:
    """Model-ready utterance: frozen stream tensor plus label and mask."""

    utt_id: str
    streams: np.ndarray  # (n_layers, T, dim)
    mask: np.ndarray  # (T,) bool
    label: int
    osm: np.ndarray | None = None  # (T, osm_dim), already aligned to T


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    hidden: int = 256

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")


@dataclass
class HeadParams:
    """Pooling scorer and two-layer tanh MLP; class_weights are data-derived, not trained."""

    pool_v: np.ndarray  # (feat,)
    pool_b: np.ndarray  # ()
    w1: np.ndarray  # (hidden, 2*feat)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (n_classes, hidden)
    b2: np.ndarray  # (n_classes,)
    class_weights: np.ndarray = field(default_factory=lambda: np.ones(N_CLASSES))

    def __post_init__(self):
        self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
        if (self.class_weights <= 0).any():
            raise ValueError("class_weights must be positive")


@dataclass
class ModelParams:
    fusion: FusionParams
    head: HeadParams

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        """Trainable tensors by name; class_weights are deliberately absent."""
        items = [
            ("fusion.layer_gain", self.fusion.layer_gain),
            ("fusion.layer_bias", self.fusion.layer_bias),
            ("fusion.attn_w", self.fusion.attn_w),
            ("fusion.attn_b", self.fusion.attn_b),
            ("fusion.temperature_raw", self.fusion.temperature_raw),
        ]
        if self.fusion.augmented:
            items += [
                ("fusion.mod_gain_fused", self.fusion.mod_gain_fused),
                ("fusion.mod_bias_fused", self.fusion.mod_bias_fused),
                ("fusion.mod_gain_osm", self.fusion.mod_gain_osm),
                ("fusion.mod_bias_osm", self.fusion.mod_bias_osm),
                ("fusion.gamma_fused", self.fusion.gamma_fused),
                ("fusion.gamma_osm", self.fusion.gamma_osm),
            ]
        items += [
            ("head.pool_v", self.head.pool_v),
            ("head.pool_b", self.head.pool_b),
            ("head.w1", self.head.w1),
            ("head.b1", self.head.b1),
            ("head.w2", self.head.w2),
            ("head.b2", self.head.b2),
        ]
        return items

    def copy(self) -> "ModelParams":
        fusion = replace(
            self.fusion,
            **{
                f: (None if getattr(self.fusion, f) is None else getattr(self.fusion, f).copy())
                for f in (
                    "layer_gain",
                    "layer_bias",
                    "attn_w",
                    "attn_b",
                    "temperature_raw",
                    "mod_gain_fused",
                    "mod_bias_fused",
                    "mod_gain_osm",
                    "mod_bias_osm",
                    "gamma_fused",
                    "gamma_osm",
                )
            },
        )
        head = replace(
            self.head,
            **{
                f: getattr(self.head, f).copy()
                for f in ("pool_v", "pool_b", "w1", "b1", "w2", "b2", "class_weights")
            },
        )
        return ModelParams(fusion, head)


def init_head_params(
    rng: np.random.Generator,
    feat_dim: int,
    hidden: int,
    n_classes: int = N_CLASSES,
    class_weights=None,
) -> HeadParams:
    in_dim = 2 * feat_dim
    return HeadParams(
        pool_v=0.01 * rng.standard_normal(feat_dim),
        pool_b=np.array(0.0),
        w1=rng.standard_normal((hidden, in_dim)) / np.sqrt(in_dim),
        b1=np.zeros(hidden),
        w2=rng.standard_normal((n_classes, hidden)) / np.sqrt(hidden),
        b2=np.zeros(n_classes),
        class_weights=np.ones(n_classes) if class_weights is None else class_weights,
    )


def init_model_params(
    rng: np.random.Generator,
    n_layers: int,
    dim: int,
    osm_dim: int | None = None,
    hidden: int = 256,
    class_weights=None,
) -> ModelParams:
    fusion = init_fusion_params(rng, n_layers, dim, osm_dim)
    feat = dim + (osm_dim or 0)
    return ModelParams(fusion, init_head_params(rng, feat, hidden, class_weights=class_weights))


# --- reference single-utterance operations ---------------------------------


def attentive_stats_pool(h: np.ndarray, mask: np.ndarray, v: np.ndarray, b) -> np.ndarray:
    """Attention-weighted mean and std of the valid frames, concatenated."""
    h = np.asarray(h, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("all frames masked")
    e = np.where(mask, h @ np.asarray(v, dtype=np.float64) + float(b), -np.inf)
    e = e - e.max()
    a = np.exp(e)
    a /= a.sum()
    mu = a @ h
    q = a @ (h * h)
    sd = np.sqrt(np.maximum(q - mu * mu, VAR_FLOOR))
    return np.concatenate([mu, sd])


def mlp_forward(x: np.ndarray, head: HeadParams) -> np.ndarray:
    """logits = W2 tanh(W1 x + b1) + b2."""
    x = np.asarray(x, dtype=np.float64)
    return head.w2 @ np.tanh(head.w1 @ x + head.b1) + head.b2


def weighted_ce(logits: np.ndarray, label: int, class_weights: np.ndarray):
    """Per-sample weighted cross-entropy and its gradient wrt logits.

    Batch-level normalization by the summed weights happens in the batch
    loss, not here.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise FloatingPointError("non-finite values in tensor 'logits'")
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range")
    shifted = logits - logits.max()
    logp = shifted - np.log(np.exp(shifted).sum())
    w = float(class_weights[label])
    grad = np.exp(logp)
    grad[label] -= 1.0
    return -w * logp[label], w * grad


# --- batched forward / backward ---------------------------------------------


@dataclass
class Batch:
    x: np.ndarray  # (B, n_layers, T, dim) float64, zero padded
    mask: np.ndarray  # (B, T) bool
    labels: np.ndarray  # (B,)
    osm: np.ndarray | None  # (B, T, osm_dim) float64, zero padded

    @property
    def size(self) -> int:
        return self.x.shape[0]


def collate(items: list[PreparedUtterance]) -> Batch:
    """Pad a list of utterances to a common frame count."""
    if not items:
        raise ValueError("empty batch")
    n_layers, _, dim = items[0].streams.shape
    has_osm = items[0].osm is not None
    t_max = max(it.streams.shape[1] for it in items)
    x = np.zeros((len(items), n_layers, t_max, dim))
    mask = np.zeros((len(items), t_max), dtype=bool)
    osm = None
    if has_osm:
        osm = np.zeros((len(items), t_max, items[0].osm.shape[1]))
    labels = np.empty(len(items), dtype=np.int64)
    for i, it in enumerate(items):
        if it.streams.shape[0] != n_layers or it.streams.shape[2] != dim:
            raise ValueError(f"{it.utt_id}: stream shape mismatch in batch")
        if (it.osm is not None) != has_osm:
            raise ValueError("batch mixes utterances with and without an opensmile branch")
        t = it.streams.shape[1]
        x[i, :, :t] = it.streams
        mask[i, :t] = it.mask
        if has_osm:
            osm[i, :t] = it.osm
        labels[i] = it.label
    return Batch(x, mask, labels, osm)


def _ln_forward(x, gain, bias):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x - mean) * inv
    return gain * xhat + bias, xhat, inv


def _ln_backward(dy, xhat, inv, gain, need_dx: bool):
    axes = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=axes)
    dbias = dy.sum(axis=axes)
    dx = None
    if need_dx:
        dxh = dy * gain
        dx = inv * (
            dxh - dxh.mean(axis=-1, keepdims=True) - xhat * (dxh * xhat).mean(axis=-1, keepdims=True)
        )
    return dx, dgain, dbias


def forward_batch(params: ModelParams, batch: Batch):
    """Loss plus a cache of every intermediate the reverse pass needs."""
    fp, hp = params.fusion, params.head
    if fp.augmented != (batch.osm is not None):
        raise ValueError("model and batch disagree about the opensmile branch")
    x, mask = batch.x, batch.mask
    m = mask.astype(np.float64)
    cnt = m.sum(axis=1)
    if (cnt < 1).any():
        raise ValueError("utterance with no valid frames")

    # per-layer normalization
    y, xhat, _ = _ln_forward(x, fp.layer_gain[None, :, None, :], fp.layer_bias[None, :, None, :])

    # layer summaries and attention weights
    s = np.einsum("bt,bntd->bnd", m, y) / cnt[:, None, None]
    tau = float(softplus(fp.temperature_raw) + 0.1)
    u = (s @ fp.attn_w + float(fp.attn_b)) / tau
    u_shift = u - u.max(axis=1, keepdims=True)
    eu = np.exp(u_shift)
    alpha = eu / eu.sum(axis=1, keepdims=True)

    # fused sequence
    f = np.einsum("bn,bntd->btd", alpha, y)

    if fp.augmented:
        fhat_out, f_xhat, f_inv = _ln_forward(f, fp.mod_gain_fused, fp.mod_bias_fused)
        ohat_out, o_xhat, o_inv = _ln_forward(batch.osm, fp.mod_gain_osm, fp.mod_bias_osm)
        z = np.concatenate(
            [float(fp.gamma_fused) * fhat_out, float(fp.gamma_osm) * ohat_out], axis=2
        )
    else:
        fhat_out = f_xhat = f_inv = ohat_out = o_xhat = o_inv = None
        z = f

    # attentive statistics pooling over valid frames
    e = z @ hp.pool_v + float(hp.pool_b)
    e = np.where(mask, e, -np.inf)
    e_shift = e - e.max(axis=1, keepdims=True)
    ee = np.exp(e_shift)
    a_t = ee / ee.sum(axis=1, keepdims=True)
    mu = np.einsum("bt,btf->bf", a_t, z)
    q = np.einsum("bt,btf->bf", a_t, z * z)
    var = q - mu * mu
    sd = np.sqrt(np.maximum(var, VAR_FLOOR))
    p = np.concatenate([mu, sd], axis=1)

    # MLP
    z1 = p @ hp.w1.T + hp.b1
    hh = np.tanh(z1)
    logits = hh @ hp.w2.T + hp.b2
    if not np.isfinite(logits).all():
        raise FloatingPointError("non-finite values in tensor 'logits'")

    # weighted cross-entropy, normalized by the summed weights
    wv = hp.class_weights[batch.labels]
    wsum = float(wv.sum())
    shift = logits - logits.max(axis=1, keepdims=True)
    logp = shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))
    probs = np.exp(logp)
    rows = np.arange(batch.size)
    if wsum > 0:
        loss = float(-(wv * logp[rows, batch.labels]).sum() / wsum)
    else:
        loss = 0.0
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite values in tensor 'loss'")

    cache = dict(
        batch=batch,
        m=m,
        cnt=cnt,
        xhat=xhat,
        y=y,
        s=s,
        tau=tau,
        u=u,
        alpha=alpha,
        f=f,
        f_xhat=f_xhat,
        f_inv=f_inv,
        fhat_out=fhat_out,
        o_xhat=o_xhat,
        o_inv=o_inv,
        ohat_out=ohat_out,
        z=z,
        a_t=a_t,
        mu=mu,
        var=var,
        sd=sd,
        p=p,
        hh=hh,
        logits=logits,
        probs=probs,
        wv=wv,
        wsum=wsum,
    )
    return loss, cache


def backward_batch(params: ModelParams, cache) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients for every trainable tensor."""
    fp, hp = params.fusion, params.head
    batch: Batch = cache["batch"]
    grads: dict[str, np.ndarray] = {}
    rows = np.arange(batch.size)

    # cross-entropy
    if cache["wsum"] > 0:
        dlogits = cache["probs"].copy()
        dlogits[rows, batch.labels] -= 1.0
        dlogits *= cache["wv"][:, None] / cache["wsum"]
    else:
        dlogits = np.zeros_like(cache["logits"])

    # MLP
    hh, p = cache["hh"], cache["p"]
    grads["head.w2"] = dlogits.T @ hh
    grads["head.b2"] = dlogits.sum(axis=0)
    dhh = dlogits @ hp.w2
    dz1 = dhh * (1.0 - hh * hh)
    grads["head.w1"] = dz1.T @ p
    grads["head.b1"] = dz1.sum(axis=0)
    dp = dz1 @ hp.w1

    # attentive statistics pooling
    z, a_t, mu, var, sd = cache["z"], cache["a_t"], cache["mu"], cache["var"], cache["sd"]
    feat = z.shape[2]
    dmu_out, dsd = dp[:, :feat], dp[:, feat:]
    dvar = np.where(var > VAR_FLOOR, dsd * 0.5 / sd, 0.0)
    dq = dvar
    dmu = dmu_out - 2.0 * mu * dvar
    dz = a_t[:, :, None] * (dmu[:, None, :] + 2.0 * z * dq[:, None, :])
    da = np.einsum("btf,bf->bt", z, dmu) + np.einsum("btf,bf->bt", z * z, dq)
    de = a_t * (da - (a_t * da).sum(axis=1, keepdims=True))
    grads["head.pool_v"] = np.einsum("bt,btf->f", de, z)
    grads["head.pool_b"] = np.array(de.sum())
    dz += de[:, :, None] * hp.pool_v

    # modality normalizer
    if fp.augmented:
        dim = fp.dim
        dzf, dzo = dz[:, :, :dim], dz[:, :, dim:]
        grads["fusion.gamma_fused"] = np.array((dzf * cache["fhat_out"]).sum())
        grads["fusion.gamma_osm"] = np.array((dzo * cache["ohat_out"]).sum())
        df, dgf, dbf = _ln_backward(
            float(fp.gamma_fused) * dzf, cache["f_xhat"], cache["f_inv"], fp.mod_gain_fused, True
        )
        _, dgo, dbo = _ln_backward(
            float(fp.gamma_osm) * dzo, cache["o_xhat"], cache["o_inv"], fp.mod_gain_osm, False
        )
        grads["fusion.mod_gain_fused"] = dgf
        grads["fusion.mod_bias_fused"] = dbf
        grads["fusion.mod_gain_osm"] = dgo
        grads["fusion.mod_bias_osm"] = dbo
    else:
        df = dz

    # fused sum: gradients fan out to alpha and to every normalized layer
    y, alpha = cache["y"], cache["alpha"]
    dalpha = np.einsum("btd,bntd->bn", df, y)
    dy = np.einsum("bn,btd->bntd", alpha, df)

    # attention softmax, temperature, scorer
    s, u, tau = cache["s"], cache["u"], cache["tau"]
    du = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
    grads["fusion.attn_w"] = np.einsum("bn,bnd->d", du, s) / tau
    grads["fusion.attn_b"] = np.array(du.sum() / tau)
    ds = du[:, :, None] * (fp.attn_w / tau)
    dtau = -float((du * u).sum()) / tau
    grads["fusion.temperature_raw"] = np.array(dtau * float(sigmoid(fp.temperature_raw)))

    # masked average pooling back into the normalized layers
    dy += np.einsum("bt,bnd->bntd", cache["m"] / cache["cnt"][:, None], ds)

    # per-layer norm parameters (inputs are frozen, no dx needed)
    xhat = cache["xhat"]
    grads["fusion.layer_gain"] = np.einsum("bntd,bntd->nd", dy, xhat)
    grads["fusion.layer_bias"] = dy.sum(axis=(0, 2))
    return grads


def predict_batch(params: ModelParams, batch: Batch):
    """Logits and attention weights; the loss side of the forward is discarded."""
    _, cache = forward_batch(params, batch)
    return cache["logits"], cache["alpha"]


def predict(params: ModelParams, items: list[PreparedUtterance], batch_size: int = 64):
    """Argmax class predictions and per-utterance attention weights."""
    preds = np.empty(len(items), dtype=np.int64)
    alphas = np.empty((len(items), params.fusion.n_layers))
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        logits, alpha = predict_batch(params, collate(chunk))
        preds[start : start + len(chunk)] = np.argmax(logits, axis=1)
        alphas[start : start + len(chunk)] = alpha
    return preds, alphas


# --- optimizer and training loop --------------------------------------------


class Adam:
    """Adaptive step with first/second moment scaling and global norm clipping."""

    def __init__(self, params: ModelParams, config: TrainConfig):
        self.config = config
        self.t = 0
        self.m = {name: np.zeros_like(arr) for name, arr in params.param_items()}
        self.v = {name: np.zeros_like(arr) for name, arr in params.param_items()}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        cfg = self.config
        gnorm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = cfg.clip_norm / gnorm if gnorm > cfg.clip_norm else 1.0
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for name, arr in params.param_items():
            g = grads[name] * scale
            self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * g
            self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * g * g
            step = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + cfg.adam_eps)
            arr[...] = arr - cfg.learning_rate * step


def class_weights_from_labels(labels, n_classes: int = N_CLASSES) -> np.ndarray:
    """Inverse-frequency weights N / (n_classes * N_c); errors on absent classes."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)
    if (counts == 0).any():
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"classes absent from train split: {missing}")
    return counts.sum() / (n_classes * counts.astype(np.float64))


@dataclass
class EpochStats:
    train_loss: float
    dev_macro_f1: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochStats]
    best_epoch: int
    class_weights: np.ndarray


def dev_macro_f1(params: ModelParams, items: list[PreparedUtterance]) -> float:
    preds, _ = predict(params, items)
    labels = np.array([it.label for it in items])
    return macro_f1(confusion_matrix(labels, preds))


def train(
    train_items: list[PreparedUtterance],
    dev_items: list[PreparedUtterance],
    config: TrainConfig,
) -> TrainResult:
    """Deterministic mini-batch training; returns the best-dev-epoch parameters.

    Batches are processed in sorted utterance order within each batch, so
    final parameters depend on batch composition only, not on the order the
    caller stored the utterances.
    """
    if not train_items:
        raise ValueError("empty train split")
    if not dev_items:
        raise ValueError("empty dev split")
    # canonical order: batch composition and updates depend only on the item
    # set and the seed, never on the caller's list order
    train_items = sorted(train_items, key=lambda it: it.utt_id)
    labels = [it.label for it in train_items]
    weights = class_weights_from_labels(labels)

    n_layers, _, dim = train_items[0].streams.shape
    osm_dim = None if train_items[0].osm is None else train_items[0].osm.shape[1]
    rng = np.random.default_rng([config.seed, 11])
    params = init_model_params(rng, n_layers, dim, osm_dim, config.hidden, class_weights=weights)
    opt = Adam(params, config)

    best: ModelParams | None = None
    best_f1 = -1.0
    best_epoch = -1
    history: list[EpochStats] = []
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, 13, epoch]).permutation(len(train_items))
        losses = []
        for start in range(0, len(order), config.batch_size):
            chunk = [train_items[i] for i in order[start : start + config.batch_size]]
            chunk.sort(key=lambda it: it.utt_id)
            loss, cache = forward_batch(params, collate(chunk))
            grads = backward_batch(params, cache)
            opt.step(params, grads)
            losses.append(loss)
        f1 = dev_macro_f1(params, dev_items)
        history.append(EpochStats(float(np.mean(losses)), f1))
        if f1 > best_f1:
            best_f1 = f1
            best_epoch = epoch
            best = params.copy()
    assert best is not None
    return TrainResult(best, history, best_epoch, weights)


# --- finite-difference verification ------------------------------------------


def finite_difference_check(
    params: ModelParams, batch: Batch, eps: float = 1e-3
) -> tuple[float, dict[str, float]]:
    """Max relative error between analytic and central-difference gradients."""
    _, cache = forward_batch(params, batch)
    grads = backward_batch(params, cache)

    def loss_at() -> float:
        loss, _ = forward_batch(params, batch)
        return loss

    worst = 0.0
    per_param: dict[str, float] = {}
    for name, arr in params.param_items():
        g = grads[name]
        flat = arr.reshape(-1) if arr.ndim else arr.reshape(1)
        gflat = g.reshape(-1) if g.ndim else g.reshape(1)
        err = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lo_hi = loss_at()
            flat[i] = orig - eps
            lo_lo = loss_at()
            flat[i] = orig
            fd = (lo_hi - lo_lo) / (2.0 * eps)
            denom = max(abs(fd), abs(gflat[i]), 1e-6)
            err = max(err, abs(fd - gflat[i]) / denom)
        per_param[name] = err
        worst = max(worst, err)
    return worst, per_param


def gradient_check(
    seed: int = 0,
    n_layers: int = 3,
    dim: int = 8,
    osm_dim: int | None = 6,
    hidden: int = 16,
    eps: float = 1e-3,
) -> float:
    """Run the full-pipeline check on a small random two-utterance batch.

    Uses unequal frame counts so the padding masks are exercised, and a
    paralinguistic branch so every parameter group receives gradient.
    """
    rng = np.random.default_rng([seed, 17])
    items = []
    for i, t in enumerate((5, 7)):
        items.append(
            PreparedUtterance(
                utt_id=f"g{i}",
                streams=rng.standard_normal((n_layers, t, dim)),
                mask=np.ones(t, dtype=bool),
                label=int(rng.integers(N_CLASSES)),
                osm=None if osm_dim is None else rng.standard_normal((t, osm_dim)),
            )
        )
    params = init_model_params(
        rng, n_layers, dim, osm_dim, hidden, class_weights=rng.uniform(0.5, 2.0, N_CLASSES)
    )
    worst, _ = finite_difference_check(params, collate(items), eps=eps)
    return worst
