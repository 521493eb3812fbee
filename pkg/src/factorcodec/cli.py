"""Command-line harness.

Exit codes: 0 on success, 1 on invalid configuration or usage (structured
message on stderr), 2 on runtime failure (message names the failing module).
Every run writes a replay manifest recording the command, the fully-merged
config and its hash, the seeds in effect, and the content hashes of every
checkpoint read or written — enough to reproduce the run exactly.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .audio import (
    Waveform,
    load_waveform,
    mel_spectrogram,
    read_manifest,
    save_waveform,
)
from .checkpoints import state_hash
from .config import (
    ConfigError,
    build_stage1_configs,
    build_stage2_configs,
    config_hash,
    load_config,
)
from .evaluation import (
    MetricEntry,
    f0_correlation,
    mel_distance,
    probe_leakage,
    timbre_embedding,
    write_report,
)
from .lm import (
    LmConfig,
    LmTrainConfig,
    SamplingParams,
    TextTokenizer,
    Vocab,
    build_text_tokenizer,
    build_training_sequence,
)
from .pipeline import (
    SynthesisRequest,
    load_pipeline,
    reconstruct,
    synthesize,
    tokenize_speech,
    voice_convert,
)
from .quantize import codes_to_embeddings
from .stage1 import (
    RECONSTRUCTION_MODES,
    Stage1Config,
    load_stage1,
    train_stage1,
)
from .stage2 import load_stage2, train_stage2
from .lm import train_lm
from .synth import SyntheticCorpusSpec, generate_synthetic_corpus

# Which module to blame when a command fails at runtime.
_COMMAND_MODULE = {
    "gen-data": "synth",
    "train-stage1": "stage1",
    "train-stage2": "stage2",
    "train-lm": "lm",
    "tokenize": "pipeline",
    "synthesize": "pipeline",
    "convert": "pipeline",
    "evaluate": "evaluation",
    "reconstruct-modes": "stage1",
}

# command -> {flag attr: (section, key)}; flags override file values.
_FLAG_MAP = {
    "gen-data": {
        "speakers": ("data", "speakers"),
        "patterns": ("data", "patterns"),
        "per_cell": ("data", "per_cell"),
        "phone_inventory": ("data", "phone_inventory"),
        "min_dur": ("data", "min_duration_s"),
        "max_dur": ("data", "max_duration_s"),
        "seed": ("data", "seed"),
    },
    "train-stage1": {
        "steps": ("stage1", "steps"),
        "batch_size": ("stage1", "batch_size"),
        "lr": ("stage1", "lr"),
        "seed": ("stage1", "seed"),
    },
    "train-stage2": {
        "steps": ("stage2", "steps"),
        "batch_size": ("stage2", "batch_size"),
        "lr": ("stage2", "lr"),
        "seed": ("stage2", "seed"),
    },
    "train-lm": {
        "steps": ("lm", "steps"),
        "batch_size": ("lm", "batch_size"),
        "lr": ("lm", "lr"),
        "seed": ("lm", "seed"),
    },
    "synthesize": {
        "temperature": ("sampling", "temperature"),
        "top_k": ("sampling", "top_k"),
        "top_p": ("sampling", "top_p"),
        "seed": ("sampling", "seed"),
    },
    "evaluate": {"seed": ("sampling", "seed")},
}


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this harness reserves 2 for runtime
    failures, so usage/config problems exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"config error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> _Parser:
    parser = _Parser(prog="factorcodec", description=__doc__)
    parser.add_argument("--config", default=None, help="TOML config file")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable)",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic speech corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--speakers", type=int, default=None)
    p.add_argument("--patterns", type=int, default=None)
    p.add_argument("--per-cell", dest="per_cell", type=int, default=None)
    p.add_argument("--phone-inventory", dest="phone_inventory", type=int, default=None)
    p.add_argument("--min-dur", dest="min_dur", type=float, default=None)
    p.add_argument("--max-dur", dest="max_dur", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train-stage1", help="train the tri-factor codec")
    p.add_argument("--manifest", required=True, help="corpus manifest.jsonl")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("train-stage2", help="train the fusion codec + vocoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stage1", required=True, help="trained stage-1 checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train-lm", help="train the text-to-codes language model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("tokenize", help="audio -> fused codes + timbre tokens (.npz)")
    p.add_argument("--audio", required=True)
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--out", required=True, help="output .npz path")

    p = sub.add_parser("synthesize", help="prosody continuation + timbre injection")
    p.add_argument("--text", required=True, help="target text to speak")
    p.add_argument("--prompt-audio", dest="prompt_audio", required=True)
    p.add_argument("--prompt-text", dest="prompt_text", required=True)
    p.add_argument("--timbre-ref", dest="timbre_ref", required=True)
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--out", required=True, help="output .wav path")
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--top-k", dest="top_k", type=int, default=None)
    p.add_argument("--top-p", dest="top_p", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("convert", help="source content+prosody in target timbre")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="probes + F0/mel round-trip metrics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--out", required=True, help="output report .json")
    p.add_argument("--limit", type=int, default=None, help="cap round-trip decodes")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser(
        "reconstruct-modes", help="decode with stream subsets (ablation renders)"
    )
    p.add_argument("--audio", required=True)
    p.add_argument("--stage1", required=True)
    p.add_argument("--out", required=True, help="output directory")

    return parser


def _apply_flag_overrides(args, config: dict) -> None:
    for attr, (section, key) in _FLAG_MAP.get(args.command, {}).items():
        value = getattr(args, attr, None)
        if value is not None:
            config[section][key] = value


def _manifest_sidecar(out: str | Path) -> Path:
    out = Path(out)
    if out.suffix:  # file output: sibling <name>.run.json
        return out.with_name(out.name + ".run.json")
    return out / "run.json"


def _checkpoint_sidecar_hash(model: torch.nn.Module) -> str:
    return state_hash(model.state_dict())


# ---------------------------------------------------------------------------
# command handlers: each returns (run_dict, manifest_path)
# ---------------------------------------------------------------------------


def _cmd_gen_data(args, config):
    d = config["data"]
    spec = SyntheticCorpusSpec(
        num_speakers=d["speakers"],
        num_prosody_patterns=d["patterns"],
        utterances_per_cell=d["per_cell"],
        phone_inventory_size=d["phone_inventory"],
        min_duration_s=d["min_duration_s"],
        max_duration_s=d["max_duration_s"],
        sample_rate=d["sample_rate"],
        seed=d["seed"],
    )
    records = generate_synthetic_corpus(spec, args.out)
    print(f"wrote {len(records)} utterances to {args.out}")
    run = {
        "seeds": {"data": d["seed"]},
        "inputs": {},
        "outputs": {
            "manifest": str(Path(args.out) / "manifest.jsonl"),
            "num_utterances": len(records),
        },
    }
    return run, Path(args.out) / "run.json"


def _final_loss(csv_path: Path, term: str) -> float | None:
    last = None
    if not csv_path.exists():
        return None
    for line in csv_path.read_text().splitlines()[1:]:
        step, name, value = line.split(",")
        if name == term:
            last = float(value)
    return last


def _cmd_train_stage1(args, config):
    model_cfg, train_cfg = build_stage1_configs(config)
    model = train_stage1(
        args.manifest, args.out, model_cfg, train_cfg, resume_from=args.resume
    )
    h = _checkpoint_sidecar_hash(model)
    final = _final_loss(Path(args.out) / "stage1_losses.csv", "total")
    print(f"stage1 checkpoint hash {h}")
    if final is not None:
        print(f"stage1 final total loss {final:.8f}")
    run = {
        "seeds": {"stage1": train_cfg.seed},
        "inputs": {"manifest": str(args.manifest)},
        "outputs": {
            "checkpoint": str(Path(args.out) / "stage1_final.pt"),
            "checkpoint_hash": h,
            "final_total_loss": final,
        },
    }
    if args.resume:
        run["inputs"]["resume_from"] = str(args.resume)
    return run, Path(args.out) / "run.json"


def _cmd_train_stage2(args, config):
    s1 = load_stage1(args.stage1)
    s1_hash = _checkpoint_sidecar_hash(s1)
    model_cfg, train_cfg = build_stage2_configs(
        config,
        content_dim=len(s1.config.content_levels),
        prosody_dim=len(s1.config.prosody_levels),
        timbre_dim=len(s1.config.timbre_levels),
    )
    model = train_stage2(args.manifest, args.stage1, args.out, model_cfg, train_cfg)
    h = _checkpoint_sidecar_hash(model)
    final = _final_loss(Path(args.out) / "stage2_losses.csv", "gen_mel")
    print(f"stage2 checkpoint hash {h}")
    if final is not None:
        print(f"stage2 final mel loss {final:.8f}")
    run = {
        "seeds": {"stage2": train_cfg.seed},
        "inputs": {"manifest": str(args.manifest), "stage1_checkpoint_hash": s1_hash},
        "outputs": {
            "checkpoint": str(Path(args.out) / "stage2_final.pt"),
            "checkpoint_hash": h,
            "final_mel_loss": final,
        },
    }
    return run, Path(args.out) / "run.json"


def _cmd_train_lm(args, config):
    lm_cfg = config["lm"]
    records = read_manifest(args.manifest)
    stage1 = load_stage1(args.stage1)
    stage2 = load_stage2(args.stage2)
    tokenizer = build_text_tokenizer(
        [rec.transcript for rec in records], vocab_size=lm_cfg["text_vocab_size"]
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tokenizer_path = out_dir / "tokenizer.json"
    tokenizer.save(tokenizer_path)

    vocab = Vocab(text_size=tokenizer.size, codec_size=stage2.fusion.codebook_size)
    sequences = []
    for rec in records:
        tok = tokenize_speech(rec.audio_path, stage1, stage2)
        sequences.append(
            build_training_sequence(tokenizer.encode(rec.transcript), tok.z_cp, vocab)
        )
    longest = max(len(seq.ids) for seq in sequences)
    model_cfg = LmConfig(
        vocab_size=vocab.size,
        layers=lm_cfg["layers"],
        width=lm_cfg["width"],
        heads=lm_cfg["heads"],
        context_len=max(lm_cfg["context_len"], longest),
    )
    train_cfg = LmTrainConfig(
        steps=lm_cfg["steps"],
        batch_size=lm_cfg["batch_size"],
        lr=lm_cfg["lr"],
        warmup_steps=lm_cfg["warmup_steps"],
        checkpoint_every=lm_cfg["checkpoint_every"],
        seed=lm_cfg["seed"],
    )
    model = train_lm(sequences, vocab, out_dir, model_cfg, train_cfg)
    h = _checkpoint_sidecar_hash(model)
    final = _final_loss(out_dir / "lm_losses.csv", "ce")
    print(f"lm checkpoint hash {h}")
    if final is not None:
        print(f"lm final cross-entropy {final:.8f}")
    run = {
        "seeds": {"lm": train_cfg.seed},
        "inputs": {
            "manifest": str(args.manifest),
            "stage1_checkpoint_hash": _checkpoint_sidecar_hash(stage1),
            "stage2_checkpoint_hash": _checkpoint_sidecar_hash(stage2),
        },
        "outputs": {
            "checkpoint": str(out_dir / "lm_final.pt"),
            "checkpoint_hash": h,
            "tokenizer": str(tokenizer_path),
            "final_ce": final,
        },
    }
    return run, out_dir / "run.json"


def _cmd_tokenize(args, config):
    stage1 = load_stage1(args.stage1)
    stage2 = load_stage2(args.stage2)
    tok = tokenize_speech(args.audio, stage1, stage2)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, z_cp=tok.z_cp, q_t=tok.q_t.numpy())
    print(f"tokenized {args.audio}: {tok.z_cp.shape[0]} fused codes, "
          f"{tok.q_t.shape[0]} timbre tokens -> {out}")
    run = {
        "seeds": {},
        "inputs": {
            "audio": str(args.audio),
            "stage1_checkpoint_hash": _checkpoint_sidecar_hash(stage1),
            "stage2_checkpoint_hash": _checkpoint_sidecar_hash(stage2),
        },
        "outputs": {"tokens": str(out), "num_codes": int(tok.z_cp.shape[0])},
    }
    return run, _manifest_sidecar(out)


def _cmd_synthesize(args, config):
    models = load_pipeline(args.stage1, args.stage2, args.lm, args.tokenizer)
    s = config["sampling"]
    params = SamplingParams(
        temperature=s["temperature"], top_k=s["top_k"], top_p=s["top_p"], seed=s["seed"]
    )
    request = SynthesisRequest(
        target_text=args.text,
        prompt_wav=args.prompt_audio,
        prompt_transcript=args.prompt_text,
        timbre_ref=args.timbre_ref,
    )
    result = synthesize(request, models, params)
    out = Path(args.out)
    save_waveform(result.audio, out)
    status = "truncated" if result.truncated else "complete"
    print(f"synthesized {result.num_generated} codes ({status}) -> {out}")
    run = {
        "seeds": {"sampling": s["seed"]},
        "inputs": {
            "prompt_audio": str(args.prompt_audio),
            "timbre_ref": str(args.timbre_ref),
            "stage1_checkpoint_hash": _checkpoint_sidecar_hash(models.stage1),
            "stage2_checkpoint_hash": _checkpoint_sidecar_hash(models.stage2),
            "lm_checkpoint_hash": _checkpoint_sidecar_hash(models.lm),
        },
        "outputs": {
            "audio": str(out),
            "num_generated": result.num_generated,
            "truncated": result.truncated,
        },
    }
    return run, _manifest_sidecar(out)


def _cmd_convert(args, config):
    stage1 = load_stage1(args.stage1)
    stage2 = load_stage2(args.stage2)
    wav = voice_convert(args.source, args.target, stage1, stage2)
    out = Path(args.out)
    save_waveform(wav, out)
    print(f"converted {args.source} into the timbre of {args.target} -> {out}")
    run = {
        "seeds": {},
        "inputs": {
            "source": str(args.source),
            "target": str(args.target),
            "stage1_checkpoint_hash": _checkpoint_sidecar_hash(stage1),
            "stage2_checkpoint_hash": _checkpoint_sidecar_hash(stage2),
        },
        "outputs": {"audio": str(out)},
    }
    return run, _manifest_sidecar(out)


def _cmd_evaluate(args, config):
    seed = config["sampling"]["seed"]
    records = read_manifest(args.manifest)
    stage1 = load_stage1(args.stage1)
    stage2 = load_stage2(args.stage2)
    h1 = _checkpoint_sidecar_hash(stage1)
    h2 = _checkpoint_sidecar_hash(stage2)
    ckpt_id = f"stage1:{h1[:12]},stage2:{h2[:12]}"

    toks = [tokenize_speech(rec.audio_path, stage1, stage2) for rec in records]
    speakers = np.array([rec.speaker_id for rec in records])
    timbre_vecs = np.stack([timbre_embedding(t.q_t) for t in toks])
    fused_vecs = np.stack(
        [
            codes_to_embeddings(torch.from_numpy(t.z_cp)[None], stage2.fusion.fsq)[0]
            .mean(dim=0)
            .numpy()
            for t in toks
        ]
    )

    entries = []
    probe_qt = probe_leakage(timbre_vecs, speakers, "speaker", "q_t", seed=seed)
    entries.append(
        MetricEntry("speaker_probe_timbre_tokens", probe_qt.test_accuracy,
                    probe_qt.n_test, seed, ckpt_id)
    )
    probe_zcp = probe_leakage(fused_vecs, speakers, "speaker", "z_cp", seed=seed)
    entries.append(
        MetricEntry("speaker_probe_fused_codes", probe_zcp.test_accuracy,
                    probe_zcp.n_test, seed, ckpt_id)
    )
    patterns = [rec.pattern_id for rec in records]
    if all(p is not None for p in patterns):
        probe_pat = probe_leakage(
            fused_vecs, np.array(patterns), "pattern", "z_cp", seed=seed
        )
        entries.append(
            MetricEntry("pattern_probe_fused_codes", probe_pat.test_accuracy,
                        probe_pat.n_test, seed, ckpt_id)
        )

    subset = records if args.limit is None else records[: args.limit]
    f0_values, mel_values = [], []
    for rec in subset:
        ref = load_waveform(rec.audio_path, target_rate=16000)
        out_wav = reconstruct(ref, stage1, stage2)
        r = f0_correlation(ref, out_wav)
        if r.value is not None:
            f0_values.append(r.value)
        mel_values.append(mel_distance(ref, out_wav))
    entries.append(
        MetricEntry(
            "f0_round_trip_correlation",
            float(np.mean(f0_values)) if f0_values else None,
            len(f0_values), seed, ckpt_id,
        )
    )
    entries.append(
        MetricEntry("mel_round_trip_distance", float(np.mean(mel_values)),
                    len(mel_values), seed, ckpt_id)
    )

    same, cross = [], []
    for i in range(len(records)):
        for j in range(i + 1, len(records)):
            cos = float(
                np.dot(timbre_vecs[i], timbre_vecs[j])
                / max(np.linalg.norm(timbre_vecs[i]) * np.linalg.norm(timbre_vecs[j]), 1e-12)
            )
            (same if speakers[i] == speakers[j] else cross).append(cos)
    entries.append(
        MetricEntry("same_speaker_timbre_similarity",
                    float(np.mean(same)) if same else None, len(same), seed, ckpt_id)
    )
    entries.append(
        MetricEntry("cross_speaker_timbre_similarity",
                    float(np.mean(cross)) if cross else None, len(cross), seed, ckpt_id)
    )

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, entries, extra={"num_utterances": len(records)})
    for entry in entries:
        shown = "null" if entry.value is None else f"{entry.value:.4f}"
        print(f"{entry.metric} = {shown} (n={entry.n})")
    run = {
        "seeds": {"evaluate": seed},
        "inputs": {
            "manifest": str(args.manifest),
            "stage1_checkpoint_hash": h1,
            "stage2_checkpoint_hash": h2,
        },
        "outputs": {"report": str(out)},
    }
    return run, _manifest_sidecar(out)


def _cmd_reconstruct_modes(args, config):
    stage1 = load_stage1(args.stage1)
    wav = load_waveform(args.audio, target_rate=16000)
    mel = mel_spectrogram(wav)
    wav_t = torch.from_numpy(wav.samples[: mel.num_frames * 320].copy())[None].float()
    mel_t = torch.from_numpy(mel.frames)[None].float()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for mode in RECONSTRUCTION_MODES:
        rendered = stage1.reconstruct_modes(wav_t, mel_t, mode)[0]
        name = mode.replace("+", "_") + ".wav"
        path = out_dir / name
        save_waveform(
            Waveform(samples=rendered.numpy().astype(np.float32), sample_rate=16000),
            path,
        )
        written[mode] = str(path)
        print(f"mode {mode!r} -> {path}")
    run = {
        "seeds": {},
        "inputs": {
            "audio": str(args.audio),
            "stage1_checkpoint_hash": _checkpoint_sidecar_hash(stage1),
        },
        "outputs": written,
    }
    return run, out_dir / "run.json"


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train-stage1": _cmd_train_stage1,
    "train-stage2": _cmd_train_stage2,
    "train-lm": _cmd_train_lm,
    "tokenize": _cmd_tokenize,
    "synthesize": _cmd_synthesize,
    "convert": _cmd_convert,
    "evaluate": _cmd_evaluate,
    "reconstruct-modes": _cmd_reconstruct_modes,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config, args.set)
        _apply_flag_overrides(args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        run, manifest_path = _HANDLERS[args.command](args, config)
        manifest = {
            "command": args.command,
            "config": config,
            "config_hash": config_hash(config),
            **run,
        }
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        module = _COMMAND_MODULE[args.command]
        print(f"runtime error in factorcodec.{module}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
