"""Render one utterance from each factor subset and hear what each carries.

Loads the models trained by 00_train_desk_models.py, picks one utterance,
and writes four renders next to it:

    content.wav           phone skeleton only - flat pitch, generic voice
    prosody.wav           pitch/energy contour only - hummed, no phones
    content_prosody.wav   intelligible melody, still a generic voice
    full.wav              all three factors - the complete reconstruction

A mel distance against the original is printed for each subset; it should
shrink as factors are added back.
"""

from pathlib import Path

import numpy as np
import torch

from factorcodec.audio import (
    Waveform,
    load_waveform,
    mel_spectrogram,
    read_manifest,
    save_waveform,
)
from factorcodec.stage1 import RECONSTRUCTION_MODES, load_stage1

ROOT = Path(__file__).resolve().parent / "demo_runs"


def mel_distance(a: Waveform, b: Waveform) -> float:
    ma, mb = mel_spectrogram(a).frames, mel_spectrogram(b).frames
    n = min(len(ma), len(mb))
    return float(np.abs(ma[:n] - mb[:n]).mean())


def main() -> None:
    stage1 = load_stage1(ROOT / "stage1" / "stage1_final.pt")
    record = read_manifest(ROOT / "data" / "manifest.jsonl")[17]
    ref = load_waveform(record.audio_path, target_rate=16000)
    mel = mel_spectrogram(ref)

    wav_t = torch.from_numpy(ref.samples[: mel.num_frames * 320].copy())[None].float()
    mel_t = torch.from_numpy(mel.frames)[None].float()

    out_dir = ROOT / "modes"
    out_dir.mkdir(parents=True, exist_ok=True)
    print(f"source: speaker {record.speaker_id}, pattern {record.pattern_id}")
    for mode in RECONSTRUCTION_MODES:
        with torch.no_grad():
            samples = stage1.reconstruct_modes(wav_t, mel_t, mode)[0]
        render = Waveform(samples=samples.numpy().astype(np.float32),
                          sample_rate=16000)
        path = out_dir / f"{mode.replace('+', '_')}.wav"
        save_waveform(render, path)
        print(f"  {mode:<16s} mel distance {mel_distance(ref, render):6.3f}  -> {path.name}")


if __name__ == "__main__":
    main()
