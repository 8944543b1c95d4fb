"""Command-line entry points.

Every command writes a run manifest next to its primary output. Option
values resolve as: explicit flag, then ``--config`` file, then built-in
default. A manifest is itself a valid ``--config`` file, so rerunning a
command from its manifest reproduces it.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .corpus import (FormatError, SynthVocab, Vocabulary, build_vocab, caption_ids, load_dataset,
                     save_dataset, save_embeddings, synth_dataset)
from .guidance import DEFAULT_EMBED_DIM, DEFAULT_K, DEFAULT_N, EmbeddingTable, GuidanceSet, RetrievalIndex
from .model import ModelConfig, full_graph_gradcheck
from .pipeline import (CaptionResult, Embedder, TrainConfig, caption_records, evaluate,
                       export_attention, guidance_sets, train, write_pgm)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION = 0, 2, 3, 4
GRADCHECK_TOL = 1e-4

log = logging.getLogger("tgcap")


class ValidationFailure(Exception):
    """A command ran but its result failed a declared check."""


# -- option declarations ---------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    p.add_argument("--config", type=Path, default=None,
                   help="JSON file of option values (or an earlier run manifest)")
    p.add_argument("--deterministic", action="store_true", default=False,
                   help="single BLAS thread and sequential inference")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for inference")


def _retrieval(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n", type=int, default=DEFAULT_N, help="nearest-neighbour images per query")
    p.add_argument("--k", type=int, default=DEFAULT_K, help="guidance captions kept per query")


def _define(sub) -> None:
    p = sub.add_parser("gen-synth", help="write a synthetic dataset directory")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="dataset directory to create")
    p.add_argument("--num-images", type=int, default=250, help="total images")
    p.add_argument("--test", type=int, default=50, help="images assigned to the test split")
    p.add_argument("--val", type=int, default=0, help="images assigned to the val split")
    p.add_argument("--grid", type=int, default=4, help="grid side R")
    p.add_argument("--channels", type=int, default=32, help="feature width P")
    p.add_argument("--captions-per-image", type=int, default=5, help="reference captions per image")
    p.add_argument("--min-clutter", type=int, default=0, help="fewest unnamed distractor cells")
    p.add_argument("--max-clutter", type=int, default=0, help="most unnamed distractor cells")

    p = sub.add_parser("build-vocab", help="build the vocabulary from training captions")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--threshold", type=int, default=5, help="keep words seen more than this often")
    p.add_argument("--out", type=Path, required=True, help="output file")

    p = sub.add_parser("embed", help="hash-embed every training caption into a sentence-embedding file")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--dim", type=int, default=DEFAULT_EMBED_DIM, help="sentence vector width")
    p.add_argument("--out", type=Path, required=True, help="embedding file; ids go to <out>.ids.json")

    p = sub.add_parser("retrieve", help="compute guidance sets")
    _common(p)
    _retrieval(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--split", choices=["train", "val", "test"], default="train", help="split to query")
    p.add_argument("--include-self", action="store_true", default=False,
                   help="allow a training image to retrieve its own captions")
    p.add_argument("--out", type=Path, required=True, help="output file")

    p = sub.add_parser("train", help="train a captioner")
    _common(p)
    _retrieval(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--vocab", type=Path, required=True, help="vocabulary from `build-vocab`")
    p.add_argument("--out", type=Path, required=True, help="model directory")
    p.add_argument("--guidance", type=Path, default=None, help="guidance file from `retrieve`")
    p.add_argument("--embeddings", type=Path, default=None, help="sentence-embedding file")
    p.add_argument("--epochs", type=int, default=30, help="passes over the training set")
    p.add_argument("--batch", type=int, default=80, help="images per minibatch")
    p.add_argument("--lr", type=float, default=4e-4, help="Adam learning rate")
    p.add_argument("--lr-decay", type=float, default=0.8, help="learning-rate decay factor")
    p.add_argument("--lr-decay-start", type=int, default=10, help="first epoch counted towards decay")
    p.add_argument("--lr-decay-every", type=int, default=3, help="epochs between decays")
    p.add_argument("--ss-start", type=int, default=10, help="first epoch with scheduled sampling")
    p.add_argument("--ss-prob", type=float, default=0.75, help="ground-truth input probability")
    p.add_argument("--lambda-ent", type=float, default=0.05, help="entropy regulariser weight")
    p.add_argument("--dropout", type=float, default=0.5, help="dropout rate on the LSTM output")
    p.add_argument("--hidden", type=int, default=512, help="word embedding and LSTM width")
    p.add_argument("--att-dim", type=int, default=512, help="attention embedding width D")
    p.add_argument("--embed-dim", type=int, default=DEFAULT_EMBED_DIM, help="sentence vector width S")
    p.add_argument("--attention", choices=["text", "uniform"], default="text", help="text-guided or uniform attention")
    p.add_argument("--att-activation", choices=["tanh", "none"], default="tanh", help="nonlinearity inside the attention score")
    p.add_argument("--val-every", type=int, default=1, help="epochs between validation passes (0: off)")
    p.add_argument("--include-self", action="store_true", default=False,
                   help="allow a training image to retrieve its own captions")

    p = sub.add_parser("caption", help="caption a split with a trained model")
    _common(p)
    _retrieval(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--model", type=Path, required=True, help="model directory from `train`")
    p.add_argument("--embeddings", type=Path, default=None, help="sentence-embedding file")
    p.add_argument("--split", choices=["train", "val", "test"], default="test", help="split to caption")
    p.add_argument("--beam", type=int, default=2, help="beam width")
    p.add_argument("--max-len", type=int, default=20, help="longest caption in tokens")
    p.add_argument("--out", type=Path, required=True, help="output file")

    p = sub.add_parser("evaluate", help="score a results file against references")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--results", type=Path, required=True, help="results file from `caption`")
    p.add_argument("--out", type=Path, required=True, help="output file")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss graph")
    _common(p)
    p.add_argument("--out", type=Path, default=None, help="optional JSON report")

    p = sub.add_parser("export-attn", help="write attention maps as JSON and PGM")
    _common(p)
    p.add_argument("--results", type=Path, required=True, help="results file from `caption`")
    p.add_argument("--image-id", default=None, help="only this image (default: all)")
    p.add_argument("--cell", type=int, default=16, help="raster pixels per grid cell")
    p.add_argument("--out", type=Path, required=True, help="output directory")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Shows defaults, except the uninformative None of optional paths and required options."""

    def _get_help_string(self, action):
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


class _Subcommands:
    """Creates subparsers; optionally strips every default so only typed flags survive parsing."""

    def __init__(self, sub, suppress: bool):
        self.sub, self.suppress = sub, suppress

    def add_parser(self, name: str, **kw) -> argparse.ArgumentParser:
        p = self.sub.add_parser(name, formatter_class=_HelpFormatter, **kw)
        add = p.add_argument

        def add_argument(*args, **kwargs):
            # required options may also come from --config; checked after merging
            required = kwargs.pop("required", False)
            # the defaults formatter only annotates options that carry help text
            kwargs.setdefault("help", " ")
            if required:
                kwargs["help"] = (kwargs.get("help", "").strip() + " (required)").strip()
            if self.suppress:
                kwargs["default"] = argparse.SUPPRESS
            action = add(*args, **kwargs)
            if required:
                REQUIRED.setdefault(name, set()).add(action.dest)
            return action
        p.add_argument = add_argument
        return p


REQUIRED: dict[str, set] = {}


def build_parser(suppress_defaults: bool = False) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tgcap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _define(_Subcommands(sub, suppress_defaults))
    return parser


# -- configuration resolution ------------------------------------------------------------

def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    return v


def resolve(argv: list[str]) -> tuple[argparse.Namespace, dict]:
    """Parse argv and merge flag > config file > default. Returns (options, sources)."""
    parser = build_parser()
    full = parser.parse_args(argv)
    explicit = vars(build_parser(suppress_defaults=True).parse_args(argv))
    file_values: dict = {}
    if full.config is not None:
        raw = json.loads(full.config.read_text())
        if not isinstance(raw, dict):
            raise FormatError(f"{full.config}: config must be a JSON object")
        file_values = raw.get("config", raw) if "manifest_version" in raw else raw
    types = {a.dest: a.type for sp in _subparsers(parser).values() for a in sp._actions}
    sources = {}
    for key, default in vars(full).items():
        if key in ("command", "config"):
            continue
        if key in explicit:
            sources[key] = "flag"
        elif key in file_values:
            value = file_values[key]
            conv = types.get(key)
            if value is not None and conv is not None:
                value = conv(value)
            setattr(full, key, value)
            sources[key] = "config"
        else:
            sources[key] = "default"
    missing = sorted(k for k in REQUIRED.get(full.command, ()) if getattr(full, k) is None)
    if missing:
        parser.error(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return full, sources


def _subparsers(parser: argparse.ArgumentParser) -> dict:
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction):
            return a.choices
    return {}


# -- manifest ----------------------------------------------------------------------------

def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _hash_paths(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            if f.exists() and not f.name.endswith(".manifest.json") and f.name != "manifest.json":
                out[str(f)] = sha256(f)
    return out


def write_manifest(opts: argparse.Namespace, sources: dict, inputs: list, outputs: list,
                   where: Path) -> Path:
    config = {k: _jsonable(v) for k, v in sorted(vars(opts).items()) if k not in ("command", "config")}
    manifest = {
        "manifest_version": 1,
        "command": opts.command,
        "seed": opts.seed,
        "config": config,
        "config_sources": sources,
        "inputs": _hash_paths(inputs),
        "outputs": _hash_paths(outputs),
    }
    where.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return where


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


# -- commands ----------------------------------------------------------------------------

def _write_lines(path: Path, lines) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


def _split(records, name):
    return [r for r in records if r.split == name]


def cmd_gen_synth(o) -> tuple[list, list]:
    spec = SynthVocab(min_clutter=o.min_clutter, max_clutter=o.max_clutter)
    recs = synth_dataset(o.seed, o.num_images, spec, R=o.grid, P=o.channels,
                         captions_per_image=o.captions_per_image,
                         splits={"test": o.test, "val": o.val})
    save_dataset(o.out, recs)
    return [], [o.out]


def cmd_build_vocab(o):
    vocab = build_vocab(_split(load_dataset(o.data), "train"), o.threshold)
    o.out.parent.mkdir(parents=True, exist_ok=True)
    o.out.write_text(vocab.to_json())
    print(f"{len(vocab)} words (including reserved tokens)")
    return [o.data], [o.out]


def cmd_embed(o):
    from .guidance import hash_embed
    train_recs = _split(load_dataset(o.data), "train")
    vecs = np.stack([hash_embed(c, o.dim) for r in train_recs for c in r.references])
    o.out.parent.mkdir(parents=True, exist_ok=True)
    save_embeddings(o.out, vecs)
    ids_path = o.out.with_suffix(".ids.json")
    ids_path.write_text(json.dumps(caption_ids(train_recs)))
    return [o.data], [o.out, ids_path]


def cmd_retrieve(o):
    recs = load_dataset(o.data)
    index = RetrievalIndex(_split(recs, "train"))
    sets = guidance_sets(index, _split(recs, o.split), o.n, o.k, not o.include_self)
    _write_lines(o.out, (gs.to_json() for gs in sets.values()))
    return [o.data], [o.out]


def _embedder(path: Path | None, dim: int) -> Embedder:
    if path is None:
        return Embedder(dim)
    table = EmbeddingTable.load(path)
    if table.dim != dim:
        raise ValueError(f"{path}: embedding width {table.dim} does not match --embed-dim {dim}")
    return Embedder(table.dim, table)


def cmd_train(o):
    recs = load_dataset(o.data)
    vocab = Vocabulary.from_json(o.vocab.read_text())
    train_recs = _split(recs, "train")
    P, R = train_recs[0].feature.P, train_recs[0].feature.R
    mcfg = ModelConfig(P=P, S=o.embed_dim, V=len(vocab), R=R, D=o.att_dim, E=o.hidden, H=o.hidden,
                       lambda_ent=o.lambda_ent, dropout=o.dropout, attention=o.attention,
                       att_activation=o.att_activation)
    tcfg = TrainConfig(epochs=o.epochs, batch=o.batch, lr=o.lr, lr_decay=o.lr_decay,
                       lr_decay_start=o.lr_decay_start, lr_decay_every=o.lr_decay_every,
                       ss_start=o.ss_start, ss_prob=o.ss_prob, n=o.n, k=o.k, seed=o.seed,
                       exclude_self=not o.include_self, val_every=o.val_every)
    guidance = None
    inputs = [o.data, o.vocab]
    if o.guidance is not None:
        guidance = {gs.query_id: gs for gs in map(GuidanceSet.from_json,
                                                  o.guidance.read_text().splitlines())}
        inputs.append(o.guidance)
    if o.embeddings is not None:
        inputs += [o.embeddings, o.embeddings.with_suffix(".ids.json")]
    embedder = _embedder(o.embeddings, o.embed_dim)
    o.out.mkdir(parents=True, exist_ok=True)
    log_path = o.out / "log.jsonl"
    log_path.write_text("")

    def on_epoch(entry):
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry) + "\n")

    result = train(recs, vocab, mcfg, tcfg, guidance=guidance, embedder=embedder,
                   val_records=_split(recs, "val"), on_epoch=on_epoch)
    ad.save_parameters(o.out / "model.tgap", result.params)
    (o.out / "model.json").write_text(mcfg.to_json() + "\n")
    (o.out / "vocab.json").write_text(vocab.to_json())
    last = result.log[-1] if result.log else {}
    print(json.dumps(last))
    return inputs, [o.out]


def _load_model(model_dir: Path):
    mcfg = ModelConfig.from_dict(json.loads((model_dir / "model.json").read_text()))
    params = ad.load_parameters(model_dir / "model.tgap")
    vocab = Vocabulary.from_json((model_dir / "vocab.json").read_text())
    return mcfg, params, vocab


def cmd_caption(o):
    recs = load_dataset(o.data)
    mcfg, params, vocab = _load_model(o.model)
    index = RetrievalIndex(_split(recs, "train"))
    jobs = 1 if o.deterministic else o.jobs
    results = caption_records(_split(recs, o.split), index, params, mcfg, vocab,
                              _embedder(o.embeddings, mcfg.S), n=o.n, k=o.k, beam=o.beam,
                              max_len=o.max_len, jobs=jobs)
    _write_lines(o.out, (r.to_json() for r in results))
    inputs = [o.data, o.model] + ([o.embeddings] if o.embeddings else [])
    return inputs, [o.out]


def cmd_evaluate(o):
    recs = load_dataset(o.data)
    results = [CaptionResult.from_json(l) for l in o.results.read_text().splitlines() if l.strip()]
    report = evaluate(recs, results)
    o.out.parent.mkdir(parents=True, exist_ok=True)
    o.out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: v for k, v in report.items() if k != "empty_predictions"}))
    return [o.data, o.results], [o.out]


def cmd_gradcheck(o):
    err = full_graph_gradcheck(o.seed)
    ok = err < GRADCHECK_TOL
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAIL'}, tolerance {GRADCHECK_TOL:g})")
    outputs = []
    if o.out is not None:
        o.out.parent.mkdir(parents=True, exist_ok=True)
        o.out.write_text(json.dumps({"max_relative_error": err, "tolerance": GRADCHECK_TOL,
                                     "passed": ok}) + "\n")
        outputs.append(o.out)
    if not ok:
        raise ValidationFailure(f"gradient check failed: {err:.3e} >= {GRADCHECK_TOL:g}")
    return [], outputs


def cmd_export_attn(o):
    o.out.mkdir(parents=True, exist_ok=True)
    written = 0
    for line in o.results.read_text().splitlines():
        if not line.strip():
            continue
        res = CaptionResult.from_json(line)
        if o.image_id is not None and res.image_id != o.image_id:
            continue
        data = export_attention(res)
        (o.out / f"{res.image_id}.json").write_text(json.dumps(data, indent=1) + "\n")
        write_pgm(o.out / f"{res.image_id}.pgm", np.asarray(data["weights"]), o.cell)
        written += 1
    if o.image_id is not None and not written:
        raise KeyError(f"image {o.image_id!r} not in {o.results}")
    return [o.results], [o.out]


COMMANDS: dict[str, Callable] = {
    "gen-synth": cmd_gen_synth, "build-vocab": cmd_build_vocab, "embed": cmd_embed,
    "retrieve": cmd_retrieve, "train": cmd_train, "caption": cmd_caption,
    "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck, "export-attn": cmd_export_attn,
}


def _fail(category: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": category, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        opts, sources = resolve(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except OSError as exc:
        return _fail("io", exc, EXIT_IO)
    except (ValueError, TypeError) as exc:
        return _fail("validation", exc, EXIT_VALIDATION)
    limits = threadpool_limits(1) if opts.deterministic else contextlib.nullcontext()
    try:
        with limits:
            inputs, outputs = COMMANDS[opts.command](opts)
        if outputs:
            write_manifest(opts, sources, inputs, outputs, _manifest_path(Path(outputs[0])))
    except ValidationFailure as exc:
        return _fail("validation", exc, EXIT_VALIDATION)
    except OSError as exc:
        return _fail("io", exc, EXIT_IO)
    except (ValueError, KeyError, FloatingPointError) as exc:
        return _fail("validation", exc, EXIT_VALIDATION)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
