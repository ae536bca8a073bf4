"""Synthetic desk-scale dataset with class-distinct tone/noise textures.

Each generated recording follows the real on-disk layout (WAV plus
same-stem annotation, patient id as the filename's first token, diagnosis
file). Cycle classes carry distinct foreground textures (a low tone, broad
noise, a high tone, or tone+noise) and each patient's diagnosis adds a
distinct background hum, so both the cycle-level and the recording-level
tasks are learnable from audio.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParameterError
from .ingest import write_wav

# foreground per 4-way cycle class: (tone Hz or None, noise amplitude)
_CLASS_TEXTURES = (
    (220.0, 0.00),  # Normal: low tone
    (None, 0.45),   # Crackle: broadband noise
    (1200.0, 0.00),  # Wheeze: high tone
    (1200.0, 0.45),  # Both: tone + noise
)
# background hum per diagnosis (None = silence for Healthy)
_DIAGNOSIS_ORDER = ("Healthy", "COPD", "Pneumonia", "Bronchiolitis")
_DIAGNOSIS_HUM = {"Healthy": None, "COPD": 3000.0, "Pneumonia": 500.0, "Bronchiolitis": 80.0}


def _texture(rng, n, sample_rate, tone, noise_amp, hum):
    t = np.arange(n) / sample_rate
    x = np.zeros(n)
    if tone is not None:
        x += 0.5 * np.sin(2 * np.pi * tone * t + rng.uniform(0, 2 * np.pi))
    if noise_amp > 0:
        x += noise_amp * rng.standard_normal(n)
    if hum is not None:
        x += 0.15 * np.sin(2 * np.pi * hum * t + rng.uniform(0, 2 * np.pi))
    x += 0.01 * rng.standard_normal(n)
    return np.clip(x, -0.99, 0.99)


def generate(
    out_dir,
    n_recordings: int = 40,
    n_classes: int = 4,
    seed: int = 0,
    sample_rate: int = 16000,
    cycle_seconds: float = 0.56,
    pad_seconds: float = 0.1,
    cycles_per_recording: int = 1,
    recordings_per_patient: int = 4,
):
    """Write WAV + annotation fixtures and a diagnosis file; returns stems.

    Recording i gets cycle classes rotating from i; patients rotate through
    the diagnosis list so all three disease groups appear.
    """
    if n_classes not in (2, 4):
        raise ParameterError("n_classes must be 2 or 4")
    if n_recordings < 1 or cycles_per_recording < 1:
        raise ParameterError("need at least one recording and one cycle")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    cyc_n = int(round(cycle_seconds * sample_rate))
    pad_n = int(round(pad_seconds * sample_rate))
    stems = []
    diagnoses = {}
    for i in range(n_recordings):
        patient_idx = i // recordings_per_patient
        patient = str(100 + patient_idx)
        diagnosis = _DIAGNOSIS_ORDER[patient_idx % len(_DIAGNOSIS_ORDER)]
        diagnoses[patient] = diagnosis
        hum = _DIAGNOSIS_HUM[diagnosis]
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))

        pieces = [np.zeros(pad_n)]
        lines = []
        cursor = pad_n
        for j in range(cycles_per_recording):
            cls = (i + j) % n_classes
            tone, noise_amp = _CLASS_TEXTURES[cls]
            pieces.append(_texture(rng, cyc_n, sample_rate, tone, noise_amp, hum))
            onset = cursor / sample_rate
            offset = (cursor + cyc_n) / sample_rate
            crackle = 1 if cls in (1, 3) else 0
            wheeze = 1 if cls in (2, 3) else 0
            lines.append(f"{onset:.3f} {offset:.3f} {crackle} {wheeze}")
            pieces.append(np.zeros(pad_n))
            cursor += cyc_n + pad_n

        stem = f"{patient}_syn{i:03d}"
        write_wav(out_dir / f"{stem}.wav", np.concatenate(pieces), sample_rate)
        (out_dir / f"{stem}.txt").write_text("\n".join(lines) + "\n")
        stems.append(stem)

    diag_lines = [f"{pid},{diag}" for pid, diag in sorted(diagnoses.items())]
    (out_dir / "diagnosis.csv").write_text("\n".join(diag_lines) + "\n")
    return stems
