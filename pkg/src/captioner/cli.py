"""``captioner`` command line.

Exit status is 0 on success, 2 for any error raised on purpose by the package
(bad input, config, checkpoint), with the message on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from captioner import frontend, metrics
from captioner.errors import CaptionerError, InputError
from captioner.pipeline import checkpoint, config, data, report, runner, synth
from captioner.textguide import pair_labels, read_embeddings


def _overrides(pairs: list[str]) -> dict:
    out = {}
    for item in pairs:
        key, sep, raw = item.partition("=")
        if not sep:
            raise InputError(f"--set expects key=value, got {item!r}")
        try:
            out[key] = config.tomllib.loads(f"v = {raw}")["v"]
        except config.tomllib.TOMLDecodeError:
            out[key] = raw
    return out


def _read_jsonl(path) -> list[dict]:
    try:
        lines = Path(path).read_text().splitlines()
    except FileNotFoundError as exc:
        raise InputError(f"{path}: file not found") from exc
    rows = []
    for n, line in enumerate(lines, 1):
        if line.strip():
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{n}: {exc}") from exc
    return rows


def cmd_featurize(args) -> None:
    mel = frontend.featurize_file(args.input, frontend.FrontendConfig(sample_rate=args.sample_rate))
    data.save_mel(args.out, mel)
    print(f"{args.out}\t{mel.mel_bins}\t{mel.frames}")


def cmd_prepare(args) -> None:
    cfg = config.load_config(args.config, _overrides(args.set))
    runner.prepare(cfg, log=lambda m: print(m, file=sys.stderr))


def cmd_pair_labels(args) -> None:
    pairs = pair_labels(read_embeddings(args.captions), read_embeddings(args.labels))
    text = "".join(f"{c}\t{l}\t{cos:.6f}\n" for c, l, cos in pairs)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_train(args) -> None:
    cfg = config.load_config(args.config, _overrides(args.set))
    result = runner.train(cfg, log=lambda m: print(m, file=sys.stderr))
    figure = report.plot_losses(result.log, result.out / "loss.png")
    sys.stdout.write(result.log.to_tsv())
    print(f"checkpoint: {result.out / 'final'}\nfigure: {figure}", file=sys.stderr)


def cmd_infer(args) -> None:
    bundle = checkpoint.load_checkpoint(args.ckpt)
    if args.manifest:
        manifest = data.read_manifest(args.manifest)
        preds = runner.caption_manifest(bundle, manifest, args.beam, args.len_norm)
        text = "".join(json.dumps({"id": k, "caption": v}) + "\n" for k, v in preds.items())
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        return
    if not args.input:
        raise InputError("infer needs --in clip.wav or --manifest file.jsonl")
    mel = frontend.featurize_file(args.input, bundle.frontend)
    print(runner.caption(bundle, frontend.standardize(mel.values), args.beam, args.len_norm))


def cmd_eval(args) -> None:
    preds = {str(r["id"]): r["caption"] for r in _read_jsonl(args.pred)}
    refs = {str(r["id"]): r["captions"] for r in _read_jsonl(args.refs)}
    result = metrics.evaluate(preds, refs)
    print(result.table())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    report.plot_metrics(result.to_dict(), out / "metrics.png")


def cmd_synth(args) -> None:
    out = synth.generate(args.out, n=args.n, seed=args.seed, duration=args.duration, extra=args.extra)
    print(out / "run.toml")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="captioner", description="Text-guided audio captioning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", help="WAV -> cached log-mel tensor directory")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sample-rate", type=int, default=32000)
    p.set_defaults(func=cmd_featurize)

    for name, func, text in (("prepare", cmd_prepare, "vocab, mel cache, tagger and guide cache"),
                             ("train", cmd_train, "run the three-stage schedule")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.set_defaults(func=func)

    p = sub.add_parser("pair-labels", help="nearest label per caption embedding")
    p.add_argument("--captions", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pair_labels)

    p = sub.add_parser("infer", help="caption a clip or a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--beam", type=int, default=3)
    p.add_argument("--len-norm", choices=("none", "mean"), default="mean")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth-corpus", help="write the procedural tone corpus")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--extra", type=int, default=0, help="extra clips for an enlarged pre-training manifest")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CaptionerError as exc:
        print(f"captioner: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
