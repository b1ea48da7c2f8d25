"""Seeded post-processing attack simulation on waveforms.

Every attack is a pure function of (clip, spec): the spec's 64-bit seed and
the clip id fully determine all randomness, so outputs are bitwise
reproducible across runs and thread counts. Leaf kinds cover convolutive
distortion (multi-notch FIR plus tanh drive), impulsive signal-dependent
noise, SNR-targeted stationary/colored/white additive noise, windowed-sinc
FIR filtering, and a codec round trip (mu-law companding, quantization,
resample). `series` and `parallel` specs compose leaves into mixed attacks.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .audio import AudioClip

LEAF_KINDS = (
    "convolutive",
    "impulsive_noise",
    "stationary_noise",
    "gaussian_noise",
    "color_noise",
    "fir_filter",
    "codec_sim",
)
COMPOSITE_KINDS = ("series", "parallel")
NOISE_COLORS = ("white", "pink", "brown")


class AttackError(ValueError):
    pass


class DegenerateSignalError(AttackError):
    """Signal violates a power precondition (e.g. silent clip)."""


@dataclass
class AttackSpec:
    kind: str
    params: dict = field(default_factory=dict)
    children: tuple = ()
    seed: int | None = None

    def __post_init__(self):
        self.children = tuple(self.children)
        self.validate()

    def validate(self):
        if self.kind in COMPOSITE_KINDS:
            if len(self.children) < 2:
                raise AttackError(f"{self.kind} spec needs at least 2 children")
        elif self.kind in LEAF_KINDS:
            if self.children:
                raise AttackError(f"leaf kind {self.kind!r} cannot have children")
        else:
            raise AttackError(f"unknown attack kind {self.kind!r}")

    def with_seed(self, seed: int) -> "AttackSpec":
        return AttackSpec(self.kind, dict(self.params), self.children, seed)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "params": dict(self.params), "seed": self.seed}
        if self.children:
            out["children"] = [c.to_dict() for c in self.children]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "AttackSpec":
        children = tuple(cls.from_dict(c) for c in data.get("children", []))
        return cls(data["kind"], dict(data.get("params", {})), children, data.get("seed"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "AttackSpec":
        return cls.from_dict(json.loads(text))


def derive_seed(parent_seed: int, index: int, clip_id: str) -> int:
    """Stable 64-bit child seed from (parent seed, child index, clip id)."""
    digest = hashlib.blake2b(
        f"{parent_seed}|{index}|{clip_id}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def rng_for(seed: int, clip_id: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(derive_seed(seed, 0, clip_id)))


def measure_snr(signal: AudioClip, noise: np.ndarray) -> float:
    """Signal-to-noise ratio in dB between a clip and a noise component."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.size != signal.samples.size:
        raise AttackError("signal and noise must have equal length")
    p_sig = float(np.mean(signal.samples**2))
    p_noise = float(np.mean(noise**2))
    if p_sig <= 0.0:
        raise DegenerateSignalError("signal power is zero")
    if p_noise <= 0.0:
        raise DegenerateSignalError("noise power is zero (SNR is infinite)")
    return 10.0 * np.log10(p_sig / p_noise)


def add_noise_at_snr(clip: AudioClip, noise: np.ndarray, target_snr_db: float) -> AudioClip:
    """Add `noise` scaled by the analytic gain that hits the target SNR exactly."""
    if not -10.0 <= target_snr_db <= 60.0:
        raise AttackError(f"target SNR {target_snr_db} dB outside [-10, 60]")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.size != clip.samples.size:
        raise AttackError("noise length must match clip length")
    p_sig = float(np.mean(clip.samples**2))
    p_noise = float(np.mean(noise**2))
    if p_sig <= 0.0:
        raise DegenerateSignalError("cannot target an SNR against a silent clip")
    if p_noise <= 0.0:
        raise DegenerateSignalError("noise component has zero power")
    gain = np.sqrt(p_sig / (p_noise * 10.0 ** (target_snr_db / 10.0)))
    return clip.with_samples(clip.samples + gain * noise)


def gen_noise(kind: str, length: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-power noise: white i.i.d. normal, pink/brown spectrally shaped."""
    if length <= 0:
        raise AttackError("noise length must be positive")
    white = rng.standard_normal(length)
    if kind == "white":
        shaped = white
    elif kind in ("pink", "brown"):
        spectrum = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(length)
        weights = np.zeros_like(freqs)
        exponent = 0.5 if kind == "pink" else 1.0  # amplitude ~ 1/f^e
        weights[1:] = freqs[1:] ** (-exponent)
        shaped = np.fft.irfft(spectrum * weights, n=length)
    else:
        raise AttackError(f"unknown noise kind {kind!r}")
    power = float(np.mean(shaped**2))
    if power <= 0.0:
        raise DegenerateSignalError("generated noise has zero power")
    return shaped / np.sqrt(power)


def _hamming(n: int) -> np.ndarray:
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(n) / (n - 1))


def design_fir(kind: str, cutoffs_hz, taps: int, sample_rate: int) -> np.ndarray:
    """Windowed-sinc (Hamming) linear-phase FIR taps."""
    if taps < 31 or taps % 2 == 0:
        raise AttackError(f"taps must be odd and >= 31, got {taps}")
    nyquist = sample_rate / 2.0
    cutoffs = tuple(float(c) for c in np.atleast_1d(cutoffs_hz))
    for c in cutoffs:
        if not 0.0 < c < nyquist:
            raise AttackError(f"cutoff {c} Hz outside (0, {nyquist})")
    mid = (taps - 1) // 2
    n = np.arange(taps) - mid

    def lowpass(fc):
        h = np.sinc(2.0 * fc / sample_rate * n) * (2.0 * fc / sample_rate) * _hamming(taps)
        return h / h.sum()  # unit DC gain

    if kind == "lowpass":
        (fc,) = cutoffs
        return lowpass(fc)
    if kind == "highpass":
        (fc,) = cutoffs
        h = -lowpass(fc)
        h[mid] += 1.0  # spectral inversion of the lowpass
        return h
    if kind == "bandpass":
        lo, hi = cutoffs
        if not lo < hi:
            raise AttackError(f"bandpass cutoffs must be increasing, got {cutoffs}")
        return lowpass(hi) - lowpass(lo)
    raise AttackError(f"unknown filter kind {kind!r}")


def _convolve_same_length(samples: np.ndarray, taps: np.ndarray) -> np.ndarray:
    mid = (taps.size - 1) // 2
    full = np.convolve(samples, taps)
    return full[mid : mid + samples.size]


def fir_filter(clip: AudioClip, kind: str, cutoffs_hz, taps: int = 101) -> AudioClip:
    """Linear-phase FIR via direct convolution, trimmed to the input length."""
    h = design_fir(kind, cutoffs_hz, taps, clip.sample_rate)
    return clip.with_samples(_convolve_same_length(clip.samples, h))


def convolutive_distortion(
    clip: AudioClip,
    n_notches: int,
    gain_db_range,
    clip_drive: float,
    rng: np.random.Generator,
    taps: int = 101,
    notch_width_hz=(150.0, 600.0),
) -> AudioClip:
    """Random multi-notch FIR followed by a memoryless tanh nonlinearity."""
    if not 1 <= n_notches <= 8:
        raise AttackError(f"n_notches must be in [1, 8], got {n_notches}")
    lo_db, hi_db = (float(gain_db_range[0]), float(gain_db_range[1]))
    nyquist = clip.sample_rate / 2.0
    # Desired log-magnitude response on the rfft grid of the FIR length.
    n_bins = taps // 2 + 1
    freqs = np.arange(n_bins) * clip.sample_rate / taps
    response_db = np.zeros(n_bins)
    for _ in range(n_notches):
        center = rng.uniform(0.05 * nyquist, 0.95 * nyquist)
        depth = rng.uniform(lo_db, hi_db)
        width = rng.uniform(float(notch_width_hz[0]), float(notch_width_hz[1]))
        response_db += depth * np.exp(-0.5 * ((freqs - center) / width) ** 2)
    magnitude = 10.0 ** (response_db / 20.0)
    mid = (taps - 1) // 2
    phase = np.exp(-2j * np.pi * np.arange(n_bins) * mid / taps)
    h = np.fft.irfft(magnitude * phase, n=taps) * _hamming(taps)
    out = _convolve_same_length(clip.samples, h)
    if clip_drive > 0.0:
        out = np.tanh(clip_drive * out) / np.tanh(clip_drive)
    return clip.with_samples(out)


def impulsive_noise(
    clip: AudioClip,
    event_rate: float,
    amp_scale: float,
    rng: np.random.Generator,
    window_ms: float = 20.0,
) -> AudioClip:
    """Sparse impulses at Poisson positions, scaled by the local signal RMS."""
    if event_rate <= 0.0:
        raise AttackError("event_rate must be positive")
    n = clip.samples.size
    count = int(rng.poisson(event_rate * clip.duration))
    out = clip.samples.copy()
    if count == 0 or amp_scale == 0.0:
        return clip.with_samples(out)
    positions = rng.integers(0, n, size=count)
    magnitudes = rng.uniform(0.4, 1.0, size=count)
    signs = rng.choice((-1.0, 1.0), size=count)
    half = max(1, int(window_ms / 1000.0 * clip.sample_rate) // 2)
    for pos, mag, sign in zip(positions, magnitudes, signs):
        lo = max(0, pos - half)
        hi = min(n, pos + half)
        local_rms = float(np.sqrt(np.mean(clip.samples[lo:hi] ** 2)))
        out[pos] += sign * amp_scale * mag * local_rms
    return clip.with_samples(out)


def _mu_law_compress(x: np.ndarray, mu: float) -> np.ndarray:
    return np.sign(x) * np.log1p(mu * np.abs(x)) / np.log1p(mu)


def _mu_law_expand(y: np.ndarray, mu: float) -> np.ndarray:
    return np.sign(y) * ((1.0 + mu) ** np.abs(y) - 1.0) / mu


def _linear_resample(x: np.ndarray, n_out: int) -> np.ndarray:
    if n_out == x.size:
        return x.copy()
    src = np.arange(x.size, dtype=np.float64)
    dst = np.linspace(0.0, x.size - 1.0, n_out)
    return np.interp(dst, src, x)


def codec_sim(clip: AudioClip, bits: int, resample_hz: int, mu: float = 255.0) -> AudioClip:
    """Mu-law companding, uniform quantization, and a resample round trip."""
    if not 6 <= bits <= 12:
        raise AttackError(f"bits must be in [6, 12], got {bits}")
    if resample_hz > clip.sample_rate or resample_hz <= 0:
        raise AttackError(f"resample rate {resample_hz} must be in (0, {clip.sample_rate}]")
    x = np.clip(clip.samples, -1.0, 1.0)
    y = _mu_law_compress(x, mu)
    levels = 2**bits - 1
    quantized = np.round((y + 1.0) / 2.0 * levels) / levels * 2.0 - 1.0
    expanded = _mu_law_expand(quantized, mu)
    n = clip.samples.size
    n_low = max(2, int(round(n * resample_hz / clip.sample_rate)))
    down = _linear_resample(expanded, n_low)
    return clip.with_samples(_linear_resample(down, n))


def compose(specs, mode: str) -> AttackSpec:
    """Series applies children in order; parallel averages each child's output."""
    specs = tuple(specs)
    if mode not in COMPOSITE_KINDS:
        raise AttackError(f"mode must be one of {COMPOSITE_KINDS}, got {mode!r}")
    if len(specs) < 2:
        raise AttackError(f"{mode} composition needs at least 2 children")
    return AttackSpec(mode, {}, specs)


def _pick_snr(params: dict, rng: np.random.Generator, color: str) -> float:
    by_color = params.get("snr_db_by_color")
    snr = by_color[color] if by_color and color in by_color else params.get("snr_db", 10.0)
    if isinstance(snr, (list, tuple)):
        return float(rng.uniform(float(snr[0]), float(snr[1])))
    return float(snr)


def _apply_leaf(clip: AudioClip, spec: AttackSpec, eff_seed: int) -> AudioClip:
    rng = rng_for(eff_seed, clip.clip_id)
    p = spec.params
    if spec.kind == "convolutive":
        out = convolutive_distortion(
            clip,
            n_notches=int(p.get("n_notches", 4)),
            gain_db_range=p.get("gain_db_range", (-24.0, -6.0)),
            clip_drive=float(p.get("clip_drive", 2.5)),
            rng=rng,
            taps=int(p.get("taps", 101)),
            notch_width_hz=p.get("notch_width_hz", (150.0, 600.0)),
        )
    elif spec.kind == "impulsive_noise":
        out = impulsive_noise(
            clip,
            event_rate=float(p.get("event_rate", 12.0)),
            amp_scale=float(p.get("amp_scale", 2.5)),
            rng=rng,
            window_ms=float(p.get("window_ms", 20.0)),
        )
    elif spec.kind in ("stationary_noise", "gaussian_noise", "color_noise"):
        if spec.kind == "gaussian_noise":
            colors = ("white",)
        else:
            colors = tuple(p.get("colors", NOISE_COLORS))
        if len(colors) == 1:
            color = colors[0]
        else:
            weights = p.get("color_weights")
            if weights is not None:
                weights = np.asarray(weights, dtype=np.float64)
                weights = weights / weights.sum()
                color = colors[int(rng.choice(len(colors), p=weights))]
            else:
                color = colors[int(rng.integers(0, len(colors)))]
        noise = gen_noise(color, clip.samples.size, rng)
        out = add_noise_at_snr(clip, noise, _pick_snr(p, rng, color))
    elif spec.kind == "fir_filter":
        filters = p.get("filters")
        if filters is None:
            filters = [(p["filter_kind"], p["cutoffs_hz"])]
        choice = filters[int(rng.integers(0, len(filters)))] if len(filters) > 1 else filters[0]
        kind, cutoffs = choice[0], choice[1]
        out = fir_filter(clip, kind, cutoffs, taps=int(p.get("taps", 101)))
    elif spec.kind == "codec_sim":
        out = codec_sim(
            clip,
            bits=int(p.get("bits", 8)),
            resample_hz=int(p.get("resample_hz", 8000)),
        )
    else:
        raise AttackError(f"unknown attack kind {spec.kind!r}")
    peak = float(np.max(np.abs(out.samples)))
    if peak > 1.0:
        out = out.with_samples(out.samples * (0.999 / peak), peak_normalized=True)
    return out


def _apply(clip: AudioClip, spec: AttackSpec, eff_seed: int) -> AudioClip:
    if spec.kind == "series":
        out = clip
        for i, child in enumerate(spec.children):
            child_seed = child.seed if child.seed is not None else derive_seed(eff_seed, i, clip.clip_id)
            out = _apply(out, child, child_seed)
        return out
    if spec.kind == "parallel":
        branches = []
        flag = clip.peak_normalized
        for i, child in enumerate(spec.children):
            child_seed = child.seed if child.seed is not None else derive_seed(eff_seed, i, clip.clip_id)
            branch = _apply(clip, child, child_seed)
            flag = flag or branch.peak_normalized
            branches.append(branch.samples)
        acc = np.zeros_like(clip.samples)
        for samples in branches:
            acc = acc + samples
        return clip.with_samples(acc / len(branches), peak_normalized=flag)
    return _apply_leaf(clip, spec, eff_seed)


def apply_attack(clip: AudioClip, spec: AttackSpec) -> AudioClip:
    """Apply a validated spec; the seed fully determines all randomness."""
    spec.validate()
    if spec.seed is None:
        raise AttackError("root attack spec must carry a seed")
    return _apply(clip, spec, spec.seed)


# --- named presets -----------------------------------------------------------
#
# T1-T3 mirror the three core waveform-boosting families (convolutive,
# impulsive signal-dependent, stationary signal-independent). T4 is additive
# noise (training uses white only; evaluation draws white/pink/brown, the
# colored ones being unseen). T5 draws from a filter bank (evaluation adds one
# unseen cutoff). T6 is the codec round trip, evaluation-only. rawboost4-8
# are the standard combinations of families 1-3; noise_first / filter_first
# order additive noise against filtering.

_TRAIN_FILTERS = [
    ["lowpass", [2000.0]],
    ["lowpass", [4000.0]],
    ["highpass", [300.0]],
    ["highpass", [1000.0]],
    ["bandpass", [300.0, 3400.0]],
]
_EVAL_FILTERS = _TRAIN_FILTERS + [["lowpass", [1200.0]]]
# SSI noise range: low enough to mask the naive energy-delta cue
_SSI_SNR_RANGE = [-8.0, 2.0]
# additive-noise expert condition: white is the seen color; the unseen pink and
# brown colors concentrate power in the low bands, so they get milder ranges
# of roughly equal destructive effect
_WHITE_SNR_RANGE = [5.0, 15.0]
_COLORED_SNR_RANGE = [8.0, 18.0]


def _leaf(kind, **params) -> AttackSpec:
    return AttackSpec(kind, params)


def _t1() -> AttackSpec:
    return _leaf("convolutive", n_notches=6, gain_db_range=[-35.0, -10.0], clip_drive=4.0)


def _t2() -> AttackSpec:
    return _leaf("impulsive_noise", event_rate=50.0, amp_scale=4.5)


def _t3() -> AttackSpec:
    return _leaf("stationary_noise", colors=list(NOISE_COLORS), snr_db=list(_SSI_SNR_RANGE))


def _t4_train() -> AttackSpec:
    return _leaf("gaussian_noise", snr_db=list(_WHITE_SNR_RANGE))


def _t4_eval() -> AttackSpec:
    return _leaf(
        "color_noise",
        colors=list(NOISE_COLORS),
        color_weights=[0.6, 0.2, 0.2],
        snr_db_by_color={
            "white": list(_WHITE_SNR_RANGE),
            "pink": list(_COLORED_SNR_RANGE),
            "brown": list(_COLORED_SNR_RANGE),
        },
    )


def _t5(filters) -> AttackSpec:
    return _leaf("fir_filter", filters=[list(f) for f in filters], taps=101)


_PRESET_BUILDERS = {
    "T1": _t1,
    "T2": _t2,
    "T3": _t3,
    "T4": _t4_eval,
    "T4_train": _t4_train,
    "T5": lambda: _t5(_EVAL_FILTERS),
    "T5_train": lambda: _t5(_TRAIN_FILTERS),
    "T6": lambda: _leaf("codec_sim", bits=8, resample_hz=8000),
    "rawboost4": lambda: compose([_t1(), _t2(), _t3()], "series"),
    "rawboost5": lambda: compose([_t1(), _t2()], "series"),
    "rawboost6": lambda: compose([_t1(), _t3()], "series"),
    "rawboost7": lambda: compose([_t2(), _t3()], "series"),
    "rawboost8": lambda: compose([_t1(), _t2()], "parallel"),
    "noise_first": lambda: compose([_t4_train(), _t5(_TRAIN_FILTERS)], "series"),
    "filter_first": lambda: compose([_t5(_TRAIN_FILTERS), _t4_train()], "series"),
}

PRESET_NAMES = tuple(sorted(_PRESET_BUILDERS))


def preset(name: str, seed: int) -> AttackSpec:
    """A named attack spec with its root seed filled in."""
    try:
        builder = _PRESET_BUILDERS[name]
    except KeyError:
        raise AttackError(
            f"unknown attack preset {name!r}; valid presets: {', '.join(PRESET_NAMES)}"
        ) from None
    return builder().with_seed(seed)
