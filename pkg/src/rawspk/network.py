"""Front-end + depthwise-separable encoder + TDNN speaker embedder.

The encoder is five decimation-2 blocks (depthwise conv with stride 2,
pointwise conv, ReLU) on top of the front-end's stride-5 wavegram, so the
total temporal reduction is 5 * 2**5 = 160 samples (10 ms at 16 kHz). TDNN
layers, statistics pooling and a linear bottleneck produce the embedding; a
linear classifier head is used for training only.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import dropout as vd
from . import dsp
from . import frontend as fe

CHECKPOINT_VERSION = 1
FRONT_ENDS = ("mel", "tdf", "sinc")
DROPOUTS = ("none", "bd", "gd", "vd")


@dataclass
class EncoderConfig:
    n_filters: int = 30
    filter_len: int = 400
    stride: int = 5
    sample_rate: int = dsp.SAMPLE_RATE
    n_blocks: int = 5
    decimation: int = 2
    channels: tuple = (32, 32, 64, 64, 128)
    block_kernel: int = 2
    tdnn_widths: tuple = (128, 128)
    tdnn_kernels: tuple = (3, 3)
    tdnn_dilations: tuple = (1, 2)
    embedding_dim: int = 128
    n_speakers: int = 10
    bd_p: float = 0.1
    gd_alpha: float = 0.1
    vd_init_log_sigma2: float = -10.0
    vd_threshold: float = vd.PRUNE_THRESHOLD

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.tdnn_widths = tuple(self.tdnn_widths)
        self.tdnn_kernels = tuple(self.tdnn_kernels)
        self.tdnn_dilations = tuple(self.tdnn_dilations)

    def validate(self):
        if len(self.channels) != self.n_blocks:
            raise ValueError(f"{self.n_blocks} blocks but {len(self.channels)} channel widths")
        if not len(self.tdnn_widths) == len(self.tdnn_kernels) == len(self.tdnn_dilations):
            raise ValueError("tdnn widths, kernels and dilations must have equal length")
        if self.decimation < 1 or self.block_kernel < 1 or self.stride < 1:
            raise ValueError("decimation, block_kernel and stride must be >= 1")
        if self.filter_len < 2 or self.filter_len % 2:
            raise ValueError(f"filter_len must be even, got {self.filter_len}")
        if min(self.n_filters, self.embedding_dim, self.n_speakers) < 1:
            raise ValueError("n_filters, embedding_dim and n_speakers must be >= 1")

    @property
    def total_reduction(self):
        return self.stride * self.decimation ** self.n_blocks


def length_recurrence(cfg, n_samples):
    """Feature-map lengths: front-end, then after each block, then after each TDNN layer."""
    lengths = [dsp.n_frames(n_samples, cfg.filter_len, cfg.stride)]
    for _ in range(cfg.n_blocks):
        lengths.append(ad.conv_out_len(lengths[-1], cfg.block_kernel, cfg.decimation))
    for k, d in zip(cfg.tdnn_kernels, cfg.tdnn_dilations):
        lengths.append(ad.conv_out_len(lengths[-1], k, 1, d))
    return lengths


def min_input_length(cfg):
    lo = cfg.filter_len
    while length_recurrence(cfg, lo)[-1] < 1:
        lo += cfg.stride
    # step back to the exact threshold
    while lo - 1 >= cfg.filter_len and length_recurrence(cfg, lo - 1)[-1] >= 1:
        lo -= 1
    return lo


def parameter_count(cfg, front_end="tdf", dropout="none"):
    """Closed-form number of trainable scalars."""
    n = {"mel": 0, "tdf": cfg.n_filters * cfg.filter_len, "sinc": 2 * cfg.n_filters}[front_end]
    if dropout == "vd":
        n *= 2
    c_in = cfg.n_filters
    for c in cfg.channels:
        n += c_in * cfg.block_kernel + c_in * c + c
        c_in = c
    for w, k in zip(cfg.tdnn_widths, cfg.tdnn_kernels):
        n += c_in * w * k + w
        c_in = w
    n += 2 * c_in * cfg.embedding_dim + cfg.embedding_dim
    n += cfg.embedding_dim * cfg.n_speakers + cfg.n_speakers
    return n


def system_name(front_end, analytic, dropout):
    if front_end == "mel":
        return "mel"
    name = front_end + ("+H" if analytic else "")
    if dropout != "none":
        name += "+" + dropout.upper()
    return name


def validate_choice(front_end, analytic, dropout):
    if front_end not in FRONT_ENDS:
        raise ValueError(f"front_end must be one of {FRONT_ENDS}, got {front_end!r}")
    if dropout not in DROPOUTS:
        raise ValueError(f"dropout must be one of {DROPOUTS}, got {dropout!r}")
    if analytic and front_end == "mel":
        raise ValueError("analytic filters need a learnable front-end, not 'mel'")
    if dropout != "none" and front_end != "tdf":
        raise ValueError(f"dropout {dropout!r} applies to non-parametric (tdf) filters only")


def stats_pool(h):
    """Concatenate per-channel mean and standard deviation over time: [B, C, T] -> [B, 2C]."""
    return ad.concat([ad.reduce_mean(h, axis=2), ad.reduce_std(h, axis=2)], axis=1)


class SpeakerNet:
    def __init__(self, cfg, front_end="tdf", analytic=False, dropout="none", seed=0,
                 dtype=np.float32):
        cfg.validate()
        validate_choice(front_end, analytic, dropout)
        self.cfg = cfg
        self.front_end = front_end
        self.analytic = analytic
        self.dropout = dropout
        self.dtype = np.dtype(dtype)
        self.params = {}
        rng = np.random.default_rng(seed)
        self._init_params(rng)

    # ------------------------------------------------------------ parameters

    def _add(self, name, value):
        self.params[name] = ad.Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)

    def _init_params(self, rng):
        cfg = self.cfg
        mode = "analytic" if self.analytic else "real"
        if self.front_end == "tdf":
            bank = fe.gabor_init(cfg.n_filters, cfg.filter_len, cfg.sample_rate, mode, cfg.stride)
            self._add("fb.weight", bank.weights)
            if self.dropout == "vd":
                self._add("fb.log_sigma2", np.full(bank.weights.shape, cfg.vd_init_log_sigma2))
        elif self.front_end == "sinc":
            bank = fe.sinc_bank_init(cfg.n_filters, cfg.filter_len, cfg.sample_rate, mode, cfg.stride)
            self._add("fb.sinc_khz", bank.sinc_params / 1000.0)

        def he(shape, fan_in):
            return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)

        c_in = cfg.n_filters
        for i, c in enumerate(cfg.channels):
            self._add(f"block{i}.dw", he((c_in, cfg.block_kernel), cfg.block_kernel))
            self._add(f"block{i}.pw", he((c_in, c), c_in))
            self._add(f"block{i}.b", np.zeros(c))
            c_in = c
        for i, (w, k) in enumerate(zip(cfg.tdnn_widths, cfg.tdnn_kernels)):
            self._add(f"tdnn{i}.w", he((w, c_in, k), c_in * k))
            self._add(f"tdnn{i}.b", np.zeros(w))
            c_in = w
        self._add("emb.w", he((2 * c_in, cfg.embedding_dim), 2 * c_in) * 0.5)
        self._add("emb.b", np.zeros(cfg.embedding_dim))
        self._add("head.w", he((cfg.embedding_dim, cfg.n_speakers), cfg.embedding_dim) * 0.5)
        self._add("head.b", np.zeros(cfg.n_speakers))

    @property
    def n_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    @property
    def system(self):
        return system_name(self.front_end, self.analytic, self.dropout)

    # ------------------------------------------------------------ forward

    def filters(self, training=False, rng=None):
        """Effective real filters [F, L] as a tensor (noise in training, pruning at inference)."""
        cfg = self.cfg
        if self.front_end == "sinc":
            khz = self.params["fb.sinc_khz"]
            return fe.sinc_bank_tensor(ad.mul(khz, 1000.0), cfg.filter_len, cfg.sample_rate)
        w = self.params["fb.weight"]
        if self.dropout == "vd":
            ls2 = self.params["fb.log_sigma2"]
            if training:
                noise = rng.standard_normal(w.shape).astype(self.dtype)
                return vd.vd_weights_tensor(w, ls2, noise)
            return ad.mul(w, self.prune_mask().astype(self.dtype))
        if training and self.dropout == "bd":
            return ad.mul(w, vd.bernoulli_mask(w.shape, cfg.bd_p, rng).astype(self.dtype))
        if training and self.dropout == "gd":
            return ad.mul(w, vd.gaussian_mask(w.shape, cfg.gd_alpha, rng).astype(self.dtype))
        return w

    def vd_layer(self):
        if self.dropout != "vd":
            return None
        return vd.VDLayer(self.params["fb.weight"].data, self.params["fb.log_sigma2"].data)

    def prune_mask(self):
        layer = self.vd_layer()
        if layer is None:
            return np.ones((self.cfg.n_filters, self.cfg.filter_len))
        return vd.vd_prune_mask(layer, self.cfg.vd_threshold)

    def filterbank(self):
        """Inference-time filterbank (pruned weights for VD)."""
        cfg = self.cfg
        mode = "analytic" if self.analytic else "real"
        if self.front_end == "mel":
            raise ValueError("the mel front-end has no learnable filterbank")
        w = self.filters(training=False).data.astype(np.float64)
        sinc = None
        if self.front_end == "sinc":
            a = self.params["fb.sinc_khz"].data.astype(np.float64) * 1000.0
            f1, f2 = fe.clamp_sinc_params(a[:, 0], a[:, 1], cfg.sample_rate)
            sinc = np.stack([f1, f2 - f1], axis=1)
        return fe.FilterBank(w, mode=mode,
                             parameterization="sinc" if sinc is not None else "nonparametric",
                             sinc_params=sinc, stride=cfg.stride, sample_rate=cfg.sample_rate)

    def features(self, x, training=False, rng=None):
        cfg = self.cfg
        x = np.asarray(x, dtype=np.float64)
        if self.front_end == "mel":
            feats = ad.Tensor(fe.mel_features(x, cfg.n_filters, cfg.filter_len, cfg.stride,
                                              sample_rate=cfg.sample_rate).astype(self.dtype))
        else:
            mode = "analytic" if self.analytic else "real"
            feats = fe.wavegram_tensor(x.astype(self.dtype), self.filters(training, rng),
                                       mode, cfg.stride)
        # per-utterance level normalisation; keeps the spectral shape
        return ad.sub(feats, ad.reduce_mean(feats, axis=(1, 2), keepdims=True))

    def encode(self, feats):
        cfg = self.cfg
        h = feats
        for i in range(cfg.n_blocks):
            h = ad.depthwise_conv1d(h, self.params[f"block{i}.dw"], stride=cfg.decimation)
            h = ad.transpose(h, (0, 2, 1))
            h = ad.matmul(h, self.params[f"block{i}.pw"]) + self.params[f"block{i}.b"]
            h = ad.transpose(ad.relu(h), (0, 2, 1))
        for i, d in enumerate(cfg.tdnn_dilations):
            h = ad.conv1d(h, self.params[f"tdnn{i}.w"], dilation=d)
            h = ad.relu(h + ad.reshape(self.params[f"tdnn{i}.b"], (-1, 1)))
        return h

    def forward(self, x, training=False, rng=None):
        """Return ``(embeddings [B, E], logits [B, S])`` for waveforms ``x`` [B, T]."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        need = min_input_length(self.cfg)
        if x.shape[1] < need:
            raise ValueError(f"input of {x.shape[1]} samples is too short; need >= {need}")
        if training and self.dropout != "none" and rng is None:
            raise ValueError("training with dropout needs an explicit rng")
        h = self.encode(self.features(x, training, rng))
        pooled = stats_pool(h)
        emb = ad.matmul(pooled, self.params["emb.w"]) + self.params["emb.b"]
        logits = ad.matmul(ad.relu(emb), self.params["head.w"]) + self.params["head.b"]
        return emb, logits

    def kl(self):
        if self.dropout != "vd":
            return None
        return vd.vd_kl_tensor(self.params["fb.weight"], self.params["fb.log_sigma2"])

    def copy(self):
        other = SpeakerNet.__new__(SpeakerNet)
        other.__dict__.update(self.__dict__)
        other.params = {k: ad.Tensor(v.data.copy(), requires_grad=True)
                        for k, v in self.params.items()}
        return other


def build_model(cfg, front_end="tdf", analytic=False, dropout="none", seed=0, dtype=np.float32):
    return SpeakerNet(cfg, front_end, analytic, dropout, seed, dtype)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 3e-3
    sinc_lr_scale: float = 10.0
    vd_lr_scale: float = 1.0
    kl_scale: float = 1.0
    warmup_fraction: float = 0.3
    seed: int = 0


def _stack(waveforms):
    arrs = [w.samples if isinstance(w, dsp.Waveform) else np.asarray(w, dtype=np.float64)
            for w in waveforms]
    n = min(len(a) for a in arrs)
    return np.stack([a[:n] for a in arrs])


def train(model, waveforms, labels, tcfg=None, log=None):
    """Minimise cross-entropy (+ ramped, size-normalised VD KL) with Adam.

    Returns the per-epoch history ``[{"epoch", "loss", "accuracy"}, ...]``;
    the model's parameters are updated in place.
    """
    tcfg = tcfg or TrainConfig()
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("empty training set")
    if labels.min() < 0 or labels.max() >= model.cfg.n_speakers:
        raise ValueError(f"labels must lie in [0, {model.cfg.n_speakers})")
    X = _stack(waveforms)
    if len(X) != len(labels):
        raise ValueError(f"{len(X)} waveforms but {len(labels)} labels")
    rng = np.random.default_rng(tcfg.seed)
    opt = ad.Adam(model.params, lr=tcfg.lr,
                  lr_scale={"fb.sinc_khz": tcfg.sinc_lr_scale,
                            "fb.log_sigma2": tcfg.vd_lr_scale})
    n = len(labels)
    steps_per_epoch = int(np.ceil(n / tcfg.batch_size))
    total = tcfg.epochs * steps_per_epoch
    history = []
    step = 0
    for epoch in range(tcfg.epochs):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for s in range(steps_per_epoch):
            idx = order[s * tcfg.batch_size:(s + 1) * tcfg.batch_size]
            opt.zero_grad()
            _, logits = model.forward(X[idx], training=True, rng=rng)
            loss = ad.softmax_cross_entropy(logits, labels[idx])
            ce = loss.item()
            kl = model.kl()
            if kl is not None:
                beta = tcfg.kl_scale * vd.kl_weight_schedule(step, total, tcfg.warmup_fraction)
                loss = loss + kl * (beta / n)
            ad.backward(loss)
            opt.step()
            step += 1
            loss_sum += ce * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
        history.append({"epoch": epoch + 1, "loss": loss_sum / n, "accuracy": correct / n})
        if log is not None:
            log(history[-1])
    return history


def extract_embedding(model, x):
    samples = x.samples if isinstance(x, dsp.Waveform) else np.asarray(x, dtype=np.float64)
    need = min_input_length(model.cfg)
    if samples.shape[-1] < need:
        raise ValueError(f"input of {samples.shape[-1]} samples is too short; need >= {need}")
    emb, _ = model.forward(samples[None, :], training=False)
    return emb.data[0].astype(np.float64)


def extract_embeddings(model, waveforms, batch_size=32):
    out = []
    for i in range(0, len(waveforms), batch_size):
        chunk = waveforms[i:i + batch_size]
        lens = {len(w.samples if isinstance(w, dsp.Waveform) else w) for w in chunk}
        if len(lens) == 1:
            emb, _ = model.forward(_stack(chunk), training=False)
            out.append(emb.data.astype(np.float64))
        else:
            out.append(np.stack([extract_embedding(model, w) for w in chunk]))
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model, path):
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "front_end": model.front_end,
        "analytic": model.analytic,
        "dropout": model.dropout,
        "dtype": model.dtype.name,
    }
    arrays = {f"param/{k}": v.data for k, v in model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        cfg = EncoderConfig(**meta["config"])
        model = SpeakerNet(cfg, meta["front_end"], meta["analytic"], meta["dropout"],
                           dtype=np.dtype(meta["dtype"]))
        for key in data.files:
            if key.startswith("param/"):
                name = key[len("param/"):]
                if name not in model.params:
                    raise ValueError(f"{path}: unexpected parameter {name}")
                model.params[name].data = data[key].copy()
    return model
