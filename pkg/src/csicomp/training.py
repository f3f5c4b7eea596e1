"""Joint rate-distortion training and evaluation of the CSI codec.

Loss per batch: (1/B) * sum_i ||H_i - H_hat_i||^2 + lambda * R, with
H_hat_i decoded from the straight-through-quantized latent and R the
differentiable soft-rate surrogate (mean total bits per sample).  With
lambda = 0 the rate term is excluded from the graph entirely.

The symbol histogram (the entropy-model state) is refit once per epoch
from the symbols observed during that epoch.  All shuffling and noise is
derived statelessly from (seed, purpose, epoch), so a resumed run replays
the exact remaining schedule.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import coding, model, quantizer
from .autodiff import Tensor
from .channel import DatasetFile, NormalizationRecord, add_awgn_batch
from .coding import SymbolHistogram
from .model import ModelConfig
from .quantizer import QuantizerConfig

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

SALT_SHUFFLE = 301
SALT_EVAL_NOISE = 302

LOG_HEADER = "epoch,mse,soft_rate_bpp,val_nmse_db,entropy_bpp,wall_seconds"


class NumericFailure(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; defaults follow the full-scale recipe."""

    lr: float = 0.001
    batch: int = 200
    epochs: int = 1000
    lam: float = 1e-3
    bits: int = 8
    mu: float = quantizer.DEFAULT_MU
    seed: int = 0
    target_nmse_db: float | None = None  # early stop once val NMSE drops below

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")


@dataclass
class AdamState:
    """First/second moment estimates per parameter, plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(m={n: np.zeros(p.shape, dtype=np.float64) for n, p in params.items()},
                   v={n: np.zeros(p.shape, dtype=np.float64) for n, p in params.items()})


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, applied in sorted parameter-name order."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name in sorted(params):
        p = params[name]
        g = np.zeros(p.shape, dtype=np.float64) if p.grad is None \
            else p.grad.astype(np.float64)
        state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        new = p.data.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        p.data = new.astype(p.data.dtype)


@dataclass
class LossOutput:
    total: Tensor
    mse: float
    rate_bits: float  # soft-rate bits per sample (mean)
    symbols: np.ndarray | None


def loss(batch: np.ndarray, params: dict[str, Tensor], config: ModelConfig,
         qconf: QuantizerConfig, hist: SymbolHistogram, lam: float,
         quantize_mode: str = "ste") -> LossOutput:
    """Rate-distortion objective on one batch of normalized samples.

    quantize_mode: "ste" (train path), "none" (differentiable path for
    gradient checks; the quantizer is the identity), "hard" (evaluation).
    """
    if batch.size == 0:
        raise ValueError("loss: empty batch")
    b = batch.shape[0]
    x = Tensor(batch.reshape(b, 2, config.nc, config.nt))
    s = model.encoder_forward(params, config, x)
    if quantize_mode == "ste":
        latent = quantizer.ste_quantize(s, qconf)
        symbols = quantizer.quantize(s.data, qconf).symbols
    elif quantize_mode == "none":
        latent = s
        symbols = None
    elif quantize_mode == "hard":
        latent = Tensor(quantizer.quantization_round_trip(s.data, qconf)
                        .astype(s.data.dtype))
        symbols = quantizer.quantize(s.data, qconf).symbols
    else:
        raise ValueError(f"unknown quantize_mode '{quantize_mode}'")
    h_hat = model.decoder_forward(params, config, latent)
    diff = ad.sub(h_hat, x)
    mse_t = ad.mul_scalar(ad.sum_all(ad.mul(diff, diff)), 1.0 / b)
    if lam > 0:
        rate_t = ad.mul_scalar(coding.soft_rate(s, hist, qconf), 1.0 / b)
        total = ad.add(mse_t, ad.mul_scalar(rate_t, lam))
        rate_bits = float(rate_t.data)
    else:
        # rate excluded from gradients exactly; reported for the log only
        with ad.no_grad():
            rate_bits = float(coding.soft_rate(s, hist, qconf).data) / b
        total = mse_t
    if not np.isfinite(total.data):
        raise NumericFailure(f"non-finite loss (mse={float(mse_t.data)!r})")
    return LossOutput(total=total, mse=float(mse_t.data), rate_bits=rate_bits,
                      symbols=symbols)


@dataclass
class NmseResult:
    value: float
    db: float
    excluded: int = 0


def nmse(h: np.ndarray, h_hat: np.ndarray,
         norm: NormalizationRecord | None = None) -> NmseResult:
    """Mean of per-sample ||H - H_hat||^2 / ||H||^2; dB of the expectation.

    With a normalization record, both arrays are de-normalized first.
    Zero-norm samples are excluded and counted.
    """
    h = np.asarray(h, dtype=np.float64)
    h_hat = np.asarray(h_hat, dtype=np.float64)
    if h.shape != h_hat.shape:
        raise ValueError(f"nmse: shape {h.shape} vs {h_hat.shape}")
    if norm is not None:
        h = norm.denormalize(h)
        h_hat = norm.denormalize(h_hat)
    flat = h.reshape(h.shape[0], -1) if h.ndim > 1 else h.reshape(1, -1)
    flat_hat = h_hat.reshape(flat.shape)
    num = np.sum((flat - flat_hat) ** 2, axis=1)
    den = np.sum(flat * flat, axis=1)
    keep = den > 0
    excluded = int(np.sum(~keep))
    if not np.any(keep):
        raise ValueError("nmse: all samples have zero norm")
    value = float(np.mean(num[keep] / den[keep]))
    db = 10.0 * np.log10(value) if value > 0 else float("-inf")
    return NmseResult(value=value, db=db, excluded=excluded)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochLog:
    epoch: int
    mse: float
    soft_rate_bpp: float
    val_nmse_db: float
    entropy_bpp: float
    wall_seconds: float

    def row(self) -> str:
        return (f"{self.epoch},{self.mse:.8e},{self.soft_rate_bpp:.8e},"
                f"{self.val_nmse_db:.6f},{self.entropy_bpp:.8e},"
                f"{self.wall_seconds:.3f}")


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    hist: SymbolHistogram
    log: list[EpochLog] = field(default_factory=list)
    best_val_nmse_db: float = float("inf")
    epochs_run: int = 0
    stopped_early: bool = False
    adam: AdamState | None = None


def _forward_batched(params, config, data: np.ndarray, qconf: QuantizerConfig,
                     chunk: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Hard-quantized reconstruction and symbols for an array of samples."""
    outs = []
    syms = []
    with ad.no_grad():
        for i in range(0, data.shape[0], chunk):
            part = data[i:i + chunk]
            x = Tensor(part.reshape(part.shape[0], 2, config.nc, config.nt))
            s = model.encoder_forward(params, config, x)
            q = quantizer.quantize(s.data, qconf)
            s_hat = Tensor(quantizer.dequantize(q, qconf).astype(np.float32))
            h_hat = model.decoder_forward(params, config, s_hat)
            outs.append(h_hat.data.reshape(part.shape))
            syms.append(q.symbols)
    return np.concatenate(outs), np.concatenate(syms)


def validate(params, config: ModelConfig, qconf: QuantizerConfig,
             data: np.ndarray, norm: NormalizationRecord,
             hist: SymbolHistogram) -> tuple[float, float]:
    """Hard-path validation: (NMSE dB, entropy bits-per-pixel)."""
    recon, symbols = _forward_batched(params, config, data, qconf)
    res = nmse(data, recon, norm)
    rate = coding.estimate_rate(quantizer.QuantizedLatent(symbols, qconf.bits), hist)
    entropy_bpp = coding.bpp(rate.total_bits / data.shape[0], config.nc, config.nt)
    return res.db, entropy_bpp


def fit(config: ModelConfig, tconf: TrainConfig, train_set: DatasetFile,
        val_set: DatasetFile | None = None,
        params: dict[str, Tensor] | None = None,
        adam: AdamState | None = None,
        hist: SymbolHistogram | None = None,
        start_epoch: int = 0,
        log_cb=None) -> TrainResult:
    """Train the codec; returns best-validation parameters and the epoch log."""
    qconf = QuantizerConfig(bits=tconf.bits, mu=tconf.mu)
    if params is None:
        params = model.init_params(config, tconf.seed)
    if adam is None:
        adam = AdamState.init(params)
    if hist is None:
        hist = SymbolHistogram.uniform(qconf.levels)
    data = train_set.samples.reshape(train_set.count, 2 * config.nc, config.nt)
    val = None if val_set is None else \
        val_set.samples.reshape(val_set.count, 2 * config.nc, config.nt)
    norm = train_set.norm
    result = TrainResult(params=params, hist=hist, adam=adam)
    best_snapshot = {n: p.data.copy() for n, p in params.items()}
    t0 = time.monotonic()
    for epoch in range(start_epoch, tconf.epochs):
        order = np.random.default_rng(
            (tconf.seed, SALT_SHUFFLE, epoch)).permutation(train_set.count)
        epoch_counts = np.zeros(qconf.levels, dtype=np.int64)
        mse_sum = 0.0
        rate_sum = 0.0
        batches = 0
        for lo in range(0, train_set.count, tconf.batch):
            idx = order[lo:lo + tconf.batch]
            try:
                out = loss(data[idx], params, config, qconf, hist, tconf.lam, "ste")
            except (NumericFailure, FloatingPointError) as exc:
                raise NumericFailure(f"epoch {epoch}: {exc}") from exc
            ad.backward(out.total)
            adam_step(params, adam, tconf.lr)
            ad.zero_grads(params.values())
            epoch_counts += np.bincount(out.symbols.reshape(-1),
                                        minlength=qconf.levels)
            mse_sum += out.mse
            rate_sum += out.rate_bits
            batches += 1
        hist = SymbolHistogram(epoch_counts)
        result.hist = hist
        eval_data = data if val is None else val
        val_db, entropy_bpp = validate(params, config, qconf, eval_data, norm, hist)
        entry = EpochLog(
            epoch=epoch,
            mse=mse_sum / batches,
            soft_rate_bpp=coding.bpp(rate_sum / batches, config.nc, config.nt),
            val_nmse_db=val_db,
            entropy_bpp=entropy_bpp,
            wall_seconds=time.monotonic() - t0,
        )
        result.log.append(entry)
        if log_cb is not None:
            log_cb(entry)
        if val_db < result.best_val_nmse_db:
            result.best_val_nmse_db = val_db
            best_snapshot = {n: p.data.copy() for n, p in params.items()}
        result.epochs_run = epoch + 1
        if tconf.target_nmse_db is not None and val_db < tconf.target_nmse_db:
            result.stopped_early = True
            break
    result.params = {n: Tensor(a, requires_grad=True)
                     for n, a in best_snapshot.items()}
    return result


def save_train_state(path, result: TrainResult, tconf: TrainConfig,
                     norm: NormalizationRecord) -> None:
    """Resumable snapshot: live params, Adam moments, histogram, epoch."""
    arrays: dict[str, np.ndarray] = {}
    # result.params holds the best snapshot; live training state resumes from it
    for name, p in result.params.items():
        arrays[f"param/{name}"] = p.data
    adam = result.adam
    if adam is not None:
        for name in adam.m:
            arrays[f"adam_m/{name}"] = adam.m[name]
            arrays[f"adam_v/{name}"] = adam.v[name]
        arrays["meta/adam_step"] = np.array([adam.step], dtype=np.int64)
    arrays["meta/epoch"] = np.array([result.epochs_run], dtype=np.int64)
    arrays["meta/best_val"] = np.array([result.best_val_nmse_db])
    arrays["meta/hist"] = result.hist.counts
    arrays["meta/norm"] = np.array([norm.offset, norm.scale])
    np.savez(path, **arrays)


def load_train_state(path, config: ModelConfig) -> dict:
    """Keyword arguments for fit(): params, adam, hist, start_epoch."""
    with np.load(path) as blob:
        params = {}
        adam_m = {}
        adam_v = {}
        hist = None
        start_epoch = 0
        step = 0
        for key in blob.files:
            kind, _, name = key.partition("/")
            if kind == "param":
                params[name] = Tensor(blob[key].astype(np.float32),
                                      requires_grad=True)
            elif kind == "adam_m":
                adam_m[name] = blob[key].astype(np.float64)
            elif kind == "adam_v":
                adam_v[name] = blob[key].astype(np.float64)
        if "meta/hist" in blob.files:
            hist = SymbolHistogram(blob["meta/hist"])
        if "meta/epoch" in blob.files:
            start_epoch = int(blob["meta/epoch"][0])
        if "meta/adam_step" in blob.files:
            step = int(blob["meta/adam_step"][0])
    adam = AdamState(m=adam_m, v=adam_v, step=step) if adam_m else None
    return {"params": params, "adam": adam, "hist": hist,
            "start_epoch": start_epoch}


def checkpoint_entries(result: TrainResult, tconf: TrainConfig,
                       norm: NormalizationRecord) -> dict[str, np.ndarray]:
    """Weights plus entropy-model and pipeline state for one checkpoint."""
    entries = {n: p.data for n, p in result.params.items()}
    entries[model.ENTRY_HISTOGRAM] = result.hist.counts.astype(np.float32)
    entries[model.ENTRY_MU] = np.array([tconf.mu], dtype=np.float32)
    entries[model.ENTRY_BITS] = np.array([tconf.bits], dtype=np.float32)
    entries[model.ENTRY_NORM] = np.array([norm.offset, norm.scale], dtype=np.float32)
    return entries


# ---------------------------------------------------------------------------
# evaluation sweeps


@dataclass(frozen=True)
class EvalRow:
    scenario: str
    bits: int
    snr_db: float
    gamma: float
    nmse_db: float
    nominal_bpp: float
    entropy_bpp: float
    measured_bpp: float


def evaluate(params, config: ModelConfig, test_set: DatasetFile,
             bits_list, snr_list, seed: int = 0, mu: float = quantizer.DEFAULT_MU,
             scenario: str = "test") -> list[EvalRow]:
    """Hard-quantized sweep with real Huffman bits at each (k, snr) point.

    Noise is derived from (seed, snr) only, so every bit depth sees the
    same noisy inputs at a given SNR.
    """
    data = test_set.samples.reshape(test_set.count, 2 * config.nc, config.nt)
    rows = []
    for snr_db in snr_list:
        if np.isfinite(snr_db):
            rng = np.random.default_rng((seed, SALT_EVAL_NOISE, int(round(snr_db * 1000))))
            noisy = add_awgn_batch(data, test_set.norm, snr_db, rng)
        else:
            noisy = data
        for bits in bits_list:
            qconf = QuantizerConfig(bits=bits, mu=mu)
            recon, symbols = _forward_batched(params, config, noisy, qconf)
            res = nmse(data, recon, test_set.norm)
            q = quantizer.QuantizedLatent(symbols.reshape(-1), bits)
            hist = coding.fit_histogram(q.symbols, qconf.levels)
            rate = coding.estimate_rate(q, hist)
            codebook = coding.huffman_build(hist)
            stream = coding.huffman_encode(q, codebook)
            n = test_set.count
            rows.append(EvalRow(
                scenario=scenario, bits=bits, snr_db=float(snr_db),
                gamma=config.gamma,
                nmse_db=res.db,
                nominal_bpp=coding.nominal_bpp(bits, config.latent_len,
                                               config.nc, config.nt),
                entropy_bpp=coding.bpp(rate.total_bits / n, config.nc, config.nt),
                measured_bpp=coding.bpp(stream.payload_bits / n, config.nc, config.nt),
            ))
    return rows


SWEEP_CSV_HEADER = ("scenario,k,snr_db,gamma,nmse_db,"
                    "nominal_bpp,entropy_bpp,measured_bpp")
SWEEP_CSV_VERSION = 1


def sweep_rows_to_csv(rows) -> str:
    lines = [f"# sweep-csv-version {SWEEP_CSV_VERSION}", SWEEP_CSV_HEADER]
    for r in rows:
        snr = "inf" if not np.isfinite(r.snr_db) else f"{r.snr_db:.1f}"
        lines.append(f"{r.scenario},{r.bits},{snr},{r.gamma:.6f},{r.nmse_db:.6f},"
                     f"{r.nominal_bpp:.6f},{r.entropy_bpp:.6f},{r.measured_bpp:.6f}")
    return "\n".join(lines) + "\n"
