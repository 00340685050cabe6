"""Synthetic ECG recordings and templated reports with controllable abnormalities.

A recording is a sum of Gaussian P/Q/R/S/T bumps per beat placed at RR
intervals, copied across leads with a per-lead gain and delay, plus white
noise.  Each abnormality code has two report phrasings; the phrasing chosen
for a record is tied to a waveform sub-band (rate, QRS width, ST offset ...)
so the text is predictable from the signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from .tokenizer import TextReport, Vocab, tokenize

CODES = ("NORM", "AFIB", "LBBB", "STE", "TACHY", "BRADY", "PVC", "LOWVOLT")
RATE_CODES = frozenset({"AFIB", "TACHY", "BRADY"})
BASE_RATE = (60.0, 90.0)
NORMAL_SUMMARY = "normal ecg"
ABNORMAL_SUMMARY = "abnormal ecg"


@dataclass(frozen=True)
class AbnormalitySpec:
    code: str
    # one entry per template variant; keys are generator parameters
    waveform_effect: tuple[dict, ...]
    sentence_templates: tuple[str, ...]


ABNORMALITIES: dict[str, AbnormalitySpec] = {
    "NORM": AbnormalitySpec(
        "NORM",
        ({"rate": (58.0, 68.0)}, {"rate": (80.0, 92.0)}),
        ("sinus rhythm", "normal sinus rhythm"),
    ),
    "AFIB": AbnormalitySpec(
        "AFIB",
        ({"rate": (66.0, 84.0), "p_wave": 0.0, "rr_jitter": 0.25},
         {"rate": (115.0, 135.0), "p_wave": 0.0, "rr_jitter": 0.25}),
        ("atrial fibrillation", "atrial fibrillation with rapid ventricular response"),
    ),
    "LBBB": AbnormalitySpec(
        "LBBB",
        ({"qrs_width": 2.2, "t_wave": -0.6}, {"qrs_width": 3.0, "t_wave": -0.8}),
        ("left bundle branch block", "complete left bundle branch block"),
    ),
    "STE": AbnormalitySpec(
        "STE",
        ({"st_offset": 0.15}, {"st_offset": 0.35}),
        ("st segment elevation", "marked st segment elevation"),
    ),
    "TACHY": AbnormalitySpec(
        "TACHY",
        ({"rate": (105.0, 118.0)}, {"rate": (130.0, 148.0)}),
        ("sinus tachycardia", "marked sinus tachycardia"),
    ),
    "BRADY": AbnormalitySpec(
        "BRADY",
        ({"rate": (48.0, 56.0)}, {"rate": (36.0, 44.0)}),
        ("sinus bradycardia", "marked sinus bradycardia"),
    ),
    "PVC": AbnormalitySpec(
        "PVC",
        ({"n_pvc": 1}, {"n_pvc": 3}),
        ("ventricular premature complex", "frequent ventricular premature complexes"),
    ),
    "LOWVOLT": AbnormalitySpec(
        "LOWVOLT",
        ({"amplitude": 0.45}, {"amplitude": 0.3}),
        ("low qrs voltages", "low qrs voltages in limb leads"),
    ),
}

# lead II is the reference; the rest are scaled, delayed copies
_LEAD_GAINS = (1.0, 0.7, -0.5, 0.85, 0.6, -0.3, 0.9, 1.1, 1.2, 1.0, 0.8, 0.5)
_LEAD_DELAYS_S = (0.0, 0.008, -0.006, 0.004, -0.01, 0.012, 0.0, 0.006, -0.004, 0.01, -0.008, 0.002)


class CompatibilityError(ValueError):
    pass


@dataclass(frozen=True)
class ECGRecord:
    signal: np.ndarray  # (leads, samples), millivolts
    sampling_rate_hz: int
    duration_s: float
    labels: frozenset
    patient_id: str
    record_id: str = ""
    beat_times: tuple = field(default=(), compare=False, repr=False)

    @property
    def n_leads(self) -> int:
        return self.signal.shape[0]

    @property
    def n_samples(self) -> int:
        return self.signal.shape[1]


class Pair(NamedTuple):
    record: ECGRecord
    report: TextReport | None


def check_codes(codes: Iterable[str]) -> tuple[str, ...]:
    """Validate a code set and return it in canonical order."""
    codes = set(codes)
    if not codes:
        raise CompatibilityError("empty abnormality set")
    unknown = codes - set(CODES)
    if unknown:
        raise CompatibilityError(f"unknown codes {sorted(unknown)}")
    if "NORM" in codes and len(codes) > 1:
        raise CompatibilityError("NORM cannot be combined with abnormalities")
    rate = codes & RATE_CODES
    if len(rate) > 1:
        raise CompatibilityError(f"conflicting rate codes {sorted(rate)}")
    return tuple(c for c in CODES if c in codes)


def _stream(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


def draw_variants(codes: Iterable[str], seed: int) -> dict[str, int]:
    """Template variant per code; shared by the waveform and the report."""
    rng = _stream(seed, 1)
    return {c: int(rng.integers(2)) for c in check_codes(codes)}


def waveform_params(codes: Iterable[str], patient_seed: int) -> dict:
    """All generator parameters for one patient with the given codes."""
    codes = check_codes(codes)
    variants = draw_variants(codes, patient_seed)
    rng = _stream(patient_seed, 2)
    p = {
        "rate_band": BASE_RATE,
        "p_wave": 1.0,
        "rr_jitter": 0.0,
        "qrs_width": 1.0,
        "t_wave": 1.0,
        "st_offset": 0.0,
        "n_pvc": 0,
        "amplitude": 1.0,
    }
    for c in codes:
        effect = ABNORMALITIES[c].waveform_effect[variants[c]]
        for key, value in effect.items():
            p["rate_band" if key == "rate" else key] = value
    lo, hi = p.pop("rate_band")
    p["rate"] = float(rng.uniform(lo, hi))
    p["p_amp"] = float(rng.uniform(0.85, 1.15))
    p["r_amp"] = float(rng.uniform(0.85, 1.15))
    p["t_amp"] = float(rng.uniform(0.85, 1.15))
    p["width_scale"] = float(rng.uniform(0.9, 1.1))
    p["lead_gain_jitter"] = rng.uniform(0.9, 1.1, size=len(_LEAD_GAINS))
    p["variants"] = variants
    return p


def _beat_times(rate: float, duration: float, rr_jitter: float, n_pvc: int,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    rr = 60.0 / rate
    times = []
    t = rr / 2.0
    while t < duration:
        times.append(t)
        step = rr * (1.0 + rng.uniform(-rr_jitter, rr_jitter)) if rr_jitter else rr
        t += step
    times = np.asarray(times)
    is_pvc = np.zeros(len(times), dtype=bool)
    if n_pvc and len(times) > 2:
        candidates = np.arange(1, len(times) - 1)
        chosen = rng.choice(candidates, size=min(n_pvc, len(candidates)), replace=False)
        is_pvc[chosen] = True
        # premature by 40% of an RR interval; the next beat keeps its slot (compensatory pause)
        times = times - is_pvc * 0.4 * rr
    return times, is_pvc


def _components(p: dict, times: np.ndarray, is_pvc: np.ndarray) -> np.ndarray:
    """Rows of (amplitude, center_s, sigma_s) for every Gaussian bump."""
    w = p["qrs_width"] * p["width_scale"]
    rows = []
    for t, pvc in zip(times, is_pvc):
        if pvc:
            rows += [(1.3 * p["r_amp"], t, 0.012 * 3.0),
                     (-0.5 * p["t_amp"], t + 0.32, 0.06)]
            continue
        if p["p_wave"] > 0:
            rows.append((0.15 * p["p_amp"] * p["p_wave"], t - 0.16, 0.022))
        rows += [(-0.12, t - 0.03 * w, 0.010 * w),
                 (1.1 * p["r_amp"], t, 0.012 * w),
                 (-0.3, t + 0.03 * w, 0.010 * w),
                 (0.3 * p["t_amp"] * p["t_wave"], t + 0.30, 0.045)]
        if w > 1.8:
            # notched R of bundle-branch block
            rows.append((0.6 * p["r_amp"], t + 0.035 * w, 0.01 * w))
        if p["st_offset"]:
            rows.append((p["st_offset"], t + 0.16, 0.05))
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def synth_ecg(codes: Iterable[str], seed: int, *, patient_seed: int | None = None,
              rate: float | None = None, n_leads: int = 4, fs: int = 100, duration_s: float = 10.0,
              noise_sigma: float = 0.02, patient_id: str | None = None,
              record_id: str = "") -> ECGRecord:
    """Generate one recording.

    ``patient_seed`` fixes morphology, rate and report phrasing; ``seed`` fixes
    the noise and rhythm irregularity.  Two calls sharing ``patient_seed`` with
    different ``seed`` are two recordings of the same patient.
    """
    codes = check_codes(codes)
    if n_leads > len(_LEAD_GAINS):
        raise ValueError(f"at most {len(_LEAD_GAINS)} leads supported")
    patient_seed = seed if patient_seed is None else patient_seed
    p = waveform_params(codes, patient_seed)
    if rate is not None:
        p["rate"] = float(rate)
    rng = _stream(seed, 3)
    times, is_pvc = _beat_times(p["rate"], duration_s, p["rr_jitter"], p["n_pvc"], rng)
    comps = _components(p, times, is_pvc)
    n = int(round(fs * duration_s))
    t = np.arange(n) / fs
    signal = np.empty((n_leads, n))
    for lead in range(n_leads):
        tt = t[None, :] - _LEAD_DELAYS_S[lead] - comps[:, 1:2]
        wave = (comps[:, 0:1] * np.exp(-0.5 * (tt / comps[:, 2:3]) ** 2)).sum(axis=0)
        gain = _LEAD_GAINS[lead] * p["lead_gain_jitter"][lead]
        signal[lead] = gain * p["amplitude"] * wave
    if noise_sigma:
        signal += rng.normal(0.0, noise_sigma, size=signal.shape)
    return ECGRecord(
        signal=signal.astype(np.float32),
        sampling_rate_hz=fs,
        duration_s=float(duration_s),
        labels=frozenset(codes),
        patient_id=str(patient_seed) if patient_id is None else patient_id,
        record_id=record_id,
        beat_times=tuple(float(x) for x in times),
    )


def report_text(codes: Iterable[str], seed: int) -> str:
    codes = check_codes(codes)
    variants = draw_variants(codes, seed)
    sentences = [ABNORMALITIES[c].sentence_templates[variants[c]] for c in codes]
    sentences.append(NORMAL_SUMMARY if codes == ("NORM",) else ABNORMAL_SUMMARY)
    return ". ".join(sentences) + "."


def synth_report(codes: Iterable[str], seed: int, vocab: Vocab | None = None) -> TextReport:
    """One template sentence per code, then a normal/abnormal summary sentence."""
    return tokenize(report_text(codes, seed), vocab or default_vocab())


def template_texts() -> list[str]:
    texts = [NORMAL_SUMMARY, ABNORMAL_SUMMARY]
    for spec in ABNORMALITIES.values():
        texts.extend(spec.sentence_templates)
    return texts


_VOCAB: Vocab | None = None


def default_vocab() -> Vocab:
    """Vocabulary over every template sentence (fixed, independent of sampling)."""
    global _VOCAB
    if _VOCAB is None:
        _VOCAB = Vocab.build(template_texts())
    return _VOCAB


def parse_class(name: str) -> tuple[str, ...]:
    return check_codes(name.split("+"))


def class_name(codes: Iterable[str]) -> str:
    return "+".join(check_codes(codes))
