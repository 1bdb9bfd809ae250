"""Command-line entry point: ``richcount <subcommand> ...``.

Exit codes: 0 success, 2 usage or I/O error, 3 domain-state error.
Every subcommand that writes files also writes the resolved run
configuration as JSON beside them.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .alignment import (
    ContrastiveConfig,
    alignment_data_from_samples,
    separation_report,
    train_adapter_phase,
    train_ffn_phase,
)
from .counter import LOSS_TERMS, CounterConfig, train_counter
from .data import (
    DescriptionError,
    DescriptionRequest,
    HttpDescriptionClient,
    ReplayCache,
    SynthConfig,
    fetch_descriptions,
    generate_synthetic,
    load_image,
    load_manifest,
    resize_sample,
    to_counter_samples,
    write_manifest,
)
from .domain import (
    PROMPT_VARIANTS,
    SPLITS,
    ConfigurationError,
    DatasetError,
    FormatError,
    ImageSample,
    RichCountError,
)
from .evaluation import baseline_mean_count, count_image, evaluate
from .io import load_checkpoint, save_checkpoint, write_density_map, write_heatmap
from .model import ModelConfig, init_state, toy_config

log = logging.getLogger("richcount")

EXIT_OK, EXIT_USAGE, EXIT_DOMAIN = 0, 2, 3


class UsageError(Exception):
    """Bad arguments or unusable paths (exit 2)."""


class DomainError(Exception):
    """Valid request that the data or model state cannot satisfy (exit 3)."""


@dataclass
class RunConfig:
    """Resolved settings of one invocation; round-trips through JSON."""

    command: str
    args: dict = field(default_factory=dict)
    model: dict | None = None
    synth: dict | None = None
    contrastive: dict | None = None
    counter: dict | None = None

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def write(self, path):
        Path(path).write_text(self.to_json())


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, tuple):
        return list(value)
    return value


def _plain_args(args):
    return {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("func", "config")}


def _out_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc.strerror or exc}") from None
    return out


def _model_config(path):
    if path is None:
        return toy_config()
    try:
        return ModelConfig.from_dict(json.loads(Path(path).read_text()))
    except FileNotFoundError:
        raise UsageError(f"model config not found: {path}") from None
    except (json.JSONDecodeError, TypeError) as exc:
        raise UsageError(f"bad model config {path}: {exc}") from None


def _load_dataset(root):
    if not Path(root).is_dir():
        raise UsageError(f"dataset directory not found: {root}")
    try:
        return load_manifest(root)
    except DatasetError as exc:
        if str(exc).startswith(("missing file", "malformed")):
            raise UsageError(str(exc)) from None
        raise DomainError(str(exc)) from None


def _load_state(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)[0]
    except (FormatError, ValueError, KeyError) as exc:
        raise UsageError(f"unreadable checkpoint {path}: {exc}") from None


def _at_resolution(samples, size):
    out = []
    for s in samples:
        px, dots, _ = resize_sample(s, size)
        out.append(ImageSample(s.id, px, s.category, dots, s.split))
    return out


# --- subcommands -------------------------------------------------------------

def cmd_gen_synth(args):
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    try:
        synth = SynthConfig(canvas_size=args.canvas_size, count_range=(args.min_count, args.max_count),
                            seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args.out)
    ds = generate_synthetic(synth, args.n)
    write_manifest(out, ds.samples, ds.prompts)
    RunConfig("gen-synth", _plain_args(args), synth={k: _jsonable(v) for k, v in asdict(synth).items()}
              ).write(out / "config.json")
    print(f"wrote {args.n} images to {out}")
    return EXIT_OK


def cmd_describe(args):
    samples, prompts = _load_dataset(args.data)
    requests = [DescriptionRequest(s.id, s.category, args.template) for s in samples]
    cache = ReplayCache(args.cache) if args.cache else ReplayCache()
    if args.allow_network:
        try:
            client = HttpDescriptionClient.from_env(args.model_name)
        except RuntimeError as exc:
            raise UsageError(str(exc)) from None
    else:
        client = cache
    images = None
    if args.allow_network:
        images = {s.id: (Path(args.data) / "images" / s.id).read_bytes() for s in samples}
    failed = None
    try:
        results = fetch_descriptions(requests, client, allow_network=args.allow_network, cache=cache,
                                     images=images)
    except DescriptionError as exc:
        results, failed = exc.results, exc
    for sid, ps in results.items():
        prompts[sid] = ps
    write_manifest(args.data, samples, prompts, model_name=args.model_name)
    RunConfig("describe", _plain_args(args)).write(Path(args.data) / "describe_config.json")
    flagged = sorted(sid for sid, ps in results.items() if ps.flagged)
    if flagged:
        log.warning("category missing from %d description(s): %s", len(flagged), ", ".join(flagged))
    if failed is not None:
        for sid, reason in sorted(failed.errors.items()):
            print(f"{sid}: {reason}", file=sys.stderr)
        raise DomainError(f"{len(failed.errors)} description(s) unavailable")
    print(f"resolved {len(results)} descriptions")
    return EXIT_OK


def cmd_align(args):
    try:
        cfg = ContrastiveConfig(margin=args.margin, negatives_per_anchor=args.negatives,
                                batch_size=args.batch_size, epochs=args.epochs, lr=args.lr,
                                momentum=args.momentum, seed=args.seed, variants=tuple(args.variants))
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    model_cfg = _model_config(args.model_config)
    samples, prompts = _load_dataset(args.data)
    train = [s for s in samples if s.split == "train"]
    usable = [s for s in train if all(prompts[s.id].variant(v) for v in cfg.variants)]
    if len(usable) < len(train):
        log.warning("skipping %d train images without every prompt variant", len(train) - len(usable))
    if not usable:
        raise DomainError("no train images carry the requested prompt variants")
    if len({s.category.strip().lower() for s in usable}) < 2:
        raise DomainError("single-category dataset: no negatives available")
    out = _out_dir(args.out)
    state = init_state(model_cfg, args.seed)
    data = alignment_data_from_samples(state, _at_resolution(usable, model_cfg.image_size), prompts)
    state = train_adapter_phase(train_ffn_phase(state, data, cfg), data, cfg)
    state.frozen = set(state.params)
    report = separation_report(data, state)
    save_checkpoint(out / "checkpoint.ckpt", state, phase="align")
    (out / "separation_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    RunConfig("align", _plain_args(args), model=model_cfg.to_dict(),
              contrastive={k: _jsonable(v) for k, v in asdict(cfg).items()}).write(out / "config.json")
    print(f"pair_accuracy {report['pair_accuracy']:.4f}")
    return EXIT_OK


def cmd_train(args):
    try:
        cfg = CounterConfig(consistency=not args.no_consistency, epochs=args.epochs,
                            batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    if args.ckpt is None and not args.no_align:
        raise DomainError("no alignment checkpoint given (pass --ckpt, or --no-align to skip stage 1)")
    if args.ckpt is not None:
        state = _load_state(args.ckpt)
    else:
        state = init_state(_model_config(args.model_config), args.seed)
    samples, prompts = _load_dataset(args.data)
    train = [s for s in samples if s.split == "train"]
    if not train:
        raise DomainError("train split is empty")
    out = _out_dir(args.out)
    dataset = to_counter_samples(train, prompts, state.config.image_size)
    try:
        state = train_counter(state, dataset, cfg)
    except ValueError as exc:
        raise DomainError(str(exc)) from None
    state.frozen = set(state.params)
    save_checkpoint(out / "checkpoint.ckpt", state, phase="train")
    columns = ["epoch", "total"] + list(LOSS_TERMS) + [f"w_{k}" for k in LOSS_TERMS]
    with open(out / "loss_curves.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in state.history.get("counter", []):
            writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in columns[1:]])
    RunConfig("train", _plain_args(args), model=state.config.to_dict(),
              counter={k: _jsonable(v) for k, v in asdict(cfg).items()}).write(out / "config.json")
    skipped = state.history.get("counter_skipped", [])
    if skipped:
        print(f"skipped {len(skipped)} images without every prompt variant", file=sys.stderr)
    hist = state.history.get("counter", [])
    if hist:
        print(f"final loss {hist[-1]['total']:.6f}")
    return EXIT_OK


def cmd_count(args):
    if not args.prompt.strip():
        raise UsageError("--prompt must not be empty")
    if not Path(args.image).is_file():
        raise UsageError(f"image not found: {args.image}")
    state = _load_state(args.ckpt)
    try:
        image = load_image(args.image)
    except OSError as exc:
        raise UsageError(f"unreadable image {args.image}: {exc}") from None
    count, dmap = count_image(image, args.prompt, state)
    outputs = []
    if args.heatmap:
        _out_dir(Path(args.heatmap).parent)
        write_heatmap(args.heatmap, dmap)
        outputs.append(Path(args.heatmap))
    if args.density:
        _out_dir(Path(args.density).parent)
        write_density_map(args.density, dmap)
        outputs.append(Path(args.density))
    for p in outputs:
        RunConfig("count", _plain_args(args), model=state.config.to_dict()).write(
            p.with_name(p.name + ".config.json"))
    print(f"{count:.3f}")
    return EXIT_OK


def cmd_eval(args):
    samples, prompts = _load_dataset(args.data)
    split = [s for s in samples if s.split == args.split]
    if not split:
        raise DomainError(f"split {args.split!r} is empty")
    if args.baseline:
        train = [s for s in samples if s.split == "train"]
        if not train:
            raise DomainError("train split is empty; no baseline")
        model, model_dict = baseline_mean_count(train), None
    else:
        model = _load_state(args.ckpt)
        model_dict = model.config.to_dict()
    out = _out_dir(args.out)
    config = RunConfig("eval", _plain_args(args), model=model_dict)
    report = evaluate(split, model, prompts, args.variant, split=args.split,
                      config=json.loads(config.to_json()), seed=args.seed)
    stem = f"report_{args.split}_{args.variant}"
    (out / f"{stem}.json").write_text(report.to_json() + "\n")
    (out / f"{stem}.txt").write_text(report.to_table())
    config.write(out / f"{stem}.config.json")
    m = report.splits[args.split]
    print(f"MAE {m['MAE']:.4f}")
    print(f"RMSE {m['RMSE']:.4f}")
    if report.skipped:
        print(f"skipped {len(report.skipped)} images without a {args.variant} prompt", file=sys.stderr)
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="richcount", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--config", help="resolved config JSON of an earlier run; its args become defaults")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="write a synthetic shapes dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--canvas-size", type=int, default=64)
    g.add_argument("--min-count", type=int, default=1)
    g.add_argument("--max-count", type=int, default=20)
    g.set_defaults(func=cmd_gen_synth)

    d = sub.add_parser("describe", help="fill descriptions.json from a replay cache or a live endpoint")
    d.add_argument("--data", required=True)
    d.add_argument("--cache")
    d.add_argument("--allow-network", action="store_true",
                   help="query the endpoint named by RICHCOUNT_MLLM_URL on cache misses")
    d.add_argument("--template", default="Describe the {category} in this image.")
    d.add_argument("--model-name", default="mllm")
    d.set_defaults(func=cmd_describe)

    a = sub.add_parser("align", help="stage 1: visual/text alignment")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--epochs", type=int, default=10)
    a.add_argument("--margin", type=float, default=1.0)
    a.add_argument("--lr", type=float, default=0.05)
    a.add_argument("--momentum", type=float, default=0.9)
    a.add_argument("--batch-size", type=int, default=64)
    a.add_argument("--negatives", type=int, default=None, help="negatives per anchor (default: all)")
    a.add_argument("--variants", nargs="+", choices=PROMPT_VARIANTS, default=list(PROMPT_VARIANTS))
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--model-config", help="ModelConfig JSON (default: toy model)")
    a.set_defaults(func=cmd_align)

    t = sub.add_parser("train", help="stage 2: counter training")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--ckpt", help="alignment checkpoint")
    t.add_argument("--no-align", action="store_true", help="start from fresh heads instead of a checkpoint")
    t.add_argument("--no-consistency", action="store_true", help="weight the cross-prompt terms by 0")
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--model-config", help="ModelConfig JSON for --no-align (default: toy model)")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("count", help="count objects in one image")
    c.add_argument("--image", required=True)
    c.add_argument("--prompt", required=True)
    c.add_argument("--ckpt", required=True)
    c.add_argument("--heatmap", help="write a PNG heatmap here")
    c.add_argument("--density", help="write the raw density map (DMAP1 format) here")
    c.set_defaults(func=cmd_count)

    e = sub.add_parser("eval", help="MAE/RMSE on one split")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt")
    e.add_argument("--split", choices=SPLITS, default="val")
    e.add_argument("--variant", choices=PROMPT_VARIANTS, default="category")
    e.add_argument("--out", required=True)
    e.add_argument("--baseline", action="store_true", help="evaluate the mean-count baseline instead")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)
    return p


def _parse(parser, argv):
    args = parser.parse_args(argv)
    if args.config:
        try:
            saved = RunConfig.from_json(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise UsageError(f"bad --config {args.config}: {exc}") from None
        if saved.command != args.command:
            raise UsageError(f"--config is for {saved.command!r}, not {args.command!r}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**saved.args)
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    parser = build_parser()
    try:
        args = _parse(parser, argv)
    except UsageError as exc:
        print(f"richcount: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and not args.baseline and not args.ckpt:
        print("richcount: error: eval needs --ckpt or --baseline", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"richcount: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DomainError, RichCountError, ValueError) as exc:
        print(f"richcount: error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except OSError as exc:
        print(f"richcount: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
