"""Train a complete desk-scale model family into ./demo_runs (~10 min on CPU).

Produces everything the other demos load:
    demo_runs/data/      4 speakers x 4 prosody patterns x 5 utterances
    demo_runs/stage1/    factorization encoders + quantizers + decoders
    demo_runs/stage2/    fused content+prosody tokens + 24 kHz vocoder
    demo_runs/lm/        text-to-codec language model + tokenizer

Re-running skips any piece whose final checkpoint already exists.
"""

from pathlib import Path

from factorcodec.audio import read_manifest
from factorcodec.cli import main as cli_main
from factorcodec.encoders import (
    ContentEncoderConfig,
    ProsodyEncoderConfig,
    TimbreEncoderConfig,
)
from factorcodec.losses import Stage1LossWeights
from factorcodec.stage1 import Stage1Config, Stage1TrainConfig, train_stage1
from factorcodec.stage2 import Stage2Config, Stage2TrainConfig, train_stage2

ROOT = Path(__file__).resolve().parent / "demo_runs"

STAGE1_CONFIG = Stage1Config(
    content=ContentEncoderConfig(channels=(12, 16, 24, 32)),
    prosody=ProsodyEncoderConfig(width=32, dilations=(1, 2, 4, 8)),
    timbre=TimbreEncoderConfig(width=32, num_queries=8, num_blocks=1),
    content_levels=(6, 6, 6, 6),
    prosody_levels=(6, 6, 6),
    timbre_levels=(6, 6, 6, 6),
    fuse_width=48,
    num_phones=12,
    num_speakers=4,
)

# supervision weighted up relative to reconstruction: at desk scale the mel
# term otherwise monopolizes the encoders and the factors never specialize
STAGE1_WEIGHTS = Stage1LossWeights(
    w_mel=5.0, w_wav=1.0, w_pho=8.0, w_f0=8.0, w_spk=5.0,
    w_adv_spk=1.0, w_cor=1.0, w_soft_pc=1.0, w_soft_pt=1.0,
)

STAGE2_CONFIG = Stage2Config(
    fusion_levels=(6, 6, 6, 6, 6),
    content_dim=4,
    prosody_dim=3,
    timbre_dim=4,
    width=64,
    num_blocks=1,
    num_heads=2,
    upsample_channels=(48, 32, 24, 16),
    disc_periods=(2, 3, 5),
    disc_resolutions=(512,),
    disc_channels=8,
)


def main() -> None:
    data = ROOT / "data"
    if not (data / "manifest.jsonl").exists():
        assert cli_main(["gen-data", "--out", str(data)]) == 0
    records = read_manifest(data / "manifest.jsonl")
    print(f"corpus ready: {len(records)} utterances")

    s1 = ROOT / "stage1"
    if not (s1 / "stage1_final.pt").exists():
        train_stage1(
            records, s1, STAGE1_CONFIG,
            Stage1TrainConfig(steps=2500, batch_size=8, crop_frames=40,
                              lr=1e-3, warmup_steps=100, seed=0,
                              weights=STAGE1_WEIGHTS),
        )
    print("stage 1 ready")

    s2 = ROOT / "stage2"
    if not (s2 / "stage2_final.pt").exists():
        train_stage2(
            records, s1 / "stage1_final.pt", s2, STAGE2_CONFIG,
            Stage2TrainConfig(steps=2000, batch_size=4, crop_frames=40,
                              lr=1e-3, seed=0),
        )
    print("stage 2 ready")

    lm = ROOT / "lm"
    if not (lm / "lm_final.pt").exists():
        assert cli_main([
            "--set", "lm.steps=300", "--set", "lm.layers=2",
            "--set", "lm.width=64", "--set", "lm.heads=2",
            "--set", "lm.context_len=160", "--set", "lm.lr=0.001",
            "train-lm",
            "--manifest", str(data / "manifest.jsonl"),
            "--stage1", str(s1 / "stage1_final.pt"),
            "--stage2", str(s2 / "stage2_final.pt"),
            "--out", str(lm),
        ]) == 0
    print("language model ready")
    print(f"all models under {ROOT}")


if __name__ == "__main__":
    main()
