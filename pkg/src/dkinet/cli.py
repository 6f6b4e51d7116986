"""Command-line entry point: ``dkinet {synth,train,eval,predict,inspect-kg}``.

Every failure is reported as a single ``error: <Kind>: <message>`` line on
stderr with exit status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .aggregation import filter_attention, filter_embeddings
from .ehr import CODE_TYPES, EHRFormatError, PatientRecord, Visit, split
from .kg import code_offsets
from .model import TrainConfig
from .pipeline import build_model, load_inputs
from .synth import SynthSpec, generate_synthetic, summary
from .training import (bootstrap_evaluate, load_checkpoint, new_state, save_checkpoint, train)

log = logging.getLogger("dkinet")

PATH_KEYS = ("ehr", "triples", "code_map", "ddi", "out")
_BOOL_FIELDS = {"use_kg"}


class CLIError(Exception):
    """A user-facing failure with a short kind label."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# config ------------------------------------------------------------------

def _train_fields():
    return [f for f in fields(TrainConfig) if f.name not in _BOOL_FIELDS]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model/training (override --config)")
    for f in _train_fields():
        kind = {"int": int, "float": float, "str": str}[f.type if isinstance(f.type, str) else f.type.__name__]
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind, default=argparse.SUPPRESS,
                       help=f"default {f.default}")
    g.add_argument("--no-kg", dest="no_kg", action="store_true", default=argparse.SUPPRESS,
                   help="ablation arm: zero knowledge tables, alpha = beta = 0")


def merge_config(args: argparse.Namespace) -> tuple[TrainConfig, dict]:
    """Defaults, then the ``--config`` file, then explicit flags. Returns (config, paths)."""
    merged: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CLIError("FileNotFoundError", f"config file not found: {path}")
        try:
            merged.update(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise CLIError("ConfigError", f"{path}: invalid JSON ({exc.msg})") from None
    given = vars(args)
    for key in [f.name for f in _train_fields()] + ["no_kg"] + list(PATH_KEYS):
        if given.get(key) is not None:
            merged[key] = given[key]
    paths = {k: merged.pop(k, None) for k in PATH_KEYS}
    no_kg = bool(merged.pop("no_kg", False))
    try:
        cfg = TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise CLIError("ConfigError", str(exc)) from None
    if no_kg:
        cfg = cfg.ablated()
    return cfg, paths


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# commands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    spec_kw = {f.name: getattr(args, f.name) for f in fields(SynthSpec) if getattr(args, f.name, None) is not None}
    spec = SynthSpec(**spec_kw)
    data = generate_synthetic(spec, seed=args.seed)
    paths = data.write(args.out, force=args.force)
    stats = summary(data.records, len({c for t in data.triples for c in (t[0], t[2])}),
                    len({t[1] for t in data.triples}))
    dropped = sum(1 for r in data.records if len(r["visits"]) < 2)
    for k, v in stats.items():
        print(f"{k:<24} {v}")
    print(f"{'single-visit dropped':<24} {dropped}")
    for k, p in paths.items():
        print(f"wrote {k}: {p}")
    return 0


def _load_for_config(cfg: TrainConfig, paths: dict, vocab=None):
    if not paths.get("ehr"):
        raise CLIError("ConfigError", "an EHR file is required (--ehr)")
    if cfg.use_kg and not (paths.get("triples") and paths.get("code_map")):
        raise CLIError("ConfigError", "--triples and --code-map are required unless --no-kg is given")
    triples = paths.get("triples") if cfg.use_kg else None
    code_map = paths.get("code_map") if cfg.use_kg else None
    return load_inputs(paths["ehr"], triples, code_map, paths.get("ddi"), cfg.num_filters, vocab)


def cmd_train(args) -> int:
    cfg, paths = merge_config(args)
    out = Path(paths["out"] or "run")
    meta_path = out / "meta.json"
    if args.resume:
        if not meta_path.exists():
            raise CLIError("FileNotFoundError", f"no checkpoint to resume at {out}")
        ckpt = load_checkpoint(out)
        stored = ckpt.config.to_dict()
        changed = [k for k, v in cfg.to_dict().items()
                   if k != "epochs" and v != stored[k] and k in _explicit_keys(args)]
        if changed:
            raise CLIError("ConfigError", f"cannot change {changed} when resuming")
        cfg = TrainConfig(**{**stored, "epochs": cfg.epochs if "epochs" in _explicit_keys(args) else stored["epochs"]})
        paths = {**{k: ckpt.kg.get(k) for k in PATH_KEYS}, **{k: v for k, v in paths.items() if v}}
        inputs = _load_for_config(cfg, paths, ckpt.vocab)
        model = build_model(cfg, inputs)
        state = ckpt.state
    else:
        if meta_path.exists() and not args.force:
            raise CLIError("FileExistsError", f"{out} already holds a checkpoint (use --force or --resume)")
        inputs = _load_for_config(cfg, paths)
        model = build_model(cfg, inputs)
        state = new_state(model)
    out.mkdir(parents=True, exist_ok=True)
    run_paths = {k: (str(v) if v is not None else None) for k, v in paths.items() if k != "out"}
    _dump_json({**cfg.to_dict(), **run_paths}, out / "config.json")
    parts = split(inputs.patients, cfg.seed)
    print(f"patients: train {len(parts.train)}, val {len(parts.val)}, test {len(parts.test)}"
          f" (dropped {inputs.dropped} single-visit)")

    log_path = out / "train_log.jsonl"
    mode = "a" if args.resume else "w"
    with open(log_path, mode, encoding="utf-8") as log_fh:
        def on_epoch(entry):
            log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in entry.items()))

        remaining = max(cfg.epochs - state.epoch, 0)
        state = train(model, parts.train, parts.val, epochs=remaining, state=state, on_epoch=on_epoch)
    save_checkpoint(out, model, state, kg_meta=run_paths)
    print(f"best epoch {state.best_epoch} (val jaccard {state.best_jaccard:.4f}); checkpoint: {out}")
    return 0


def _explicit_keys(args) -> set[str]:
    return {k for k, v in vars(args).items() if v is not None}


def _restore(checkpoint, overrides: dict):
    try:
        ckpt = load_checkpoint(checkpoint)
    except FileNotFoundError as exc:
        raise CLIError("FileNotFoundError", str(exc)) from None
    paths = {**{k: ckpt.kg.get(k) for k in PATH_KEYS}, **{k: v for k, v in overrides.items() if v}}
    try:
        inputs = _load_for_config(ckpt.config, paths, ckpt.vocab)
    except EHRFormatError as exc:
        raise CLIError("VocabMismatch", f"data does not match the checkpoint vocabulary: {exc}") from None
    model = build_model(ckpt.config, inputs)
    return ckpt, inputs, model


def cmd_eval(args) -> int:
    ckpt, inputs, model = _restore(args.checkpoint, {"ehr": args.ehr, "triples": args.triples,
                                                      "code_map": args.code_map, "ddi": args.ddi})
    cfg = ckpt.config
    if args.split == "all":
        patients = inputs.patients
    else:
        patients = getattr(split(inputs.patients, cfg.seed), args.split)
    if not patients:
        raise CLIError("ValueError", f"the {args.split} split is empty")
    params = ckpt.state.best_params if args.params == "best" and ckpt.state.best_params is not None else ckpt.params
    seed = cfg.seed if args.seed is None else args.seed
    report = bootstrap_evaluate(model, params, patients, rounds=args.rounds, seed=seed,
                                resample=not args.no_resample, ddi=inputs.ddi)
    report.metadata.update(split=args.split, params=args.params)
    if inputs.ddi is None:
        print("notice: no DDI file given; DDI rate omitted")
    out = Path(args.out) if args.out else Path(args.checkpoint) / f"report_{args.split}.json"
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    for m, v in report.to_dict()["metrics"].items():
        print(f"{m}_mean={v['mean']:.6f} {m}_std={v['std']:.6f}")
    print(report.table())
    print(f"report: {out}")
    return 0


def _read_patient(path, patient_id: str | None):
    found = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if patient_id is None or str(obj.get("id")) == patient_id:
                found = obj
                break
    if found is None:
        raise CLIError("KeyError", f"patient {patient_id!r} not found in {path}")
    return found


def cmd_predict(args) -> int:
    ckpt, inputs, model = _restore(args.checkpoint, {"ehr": args.ehr, "triples": args.triples,
                                                      "code_map": args.code_map})
    vocab = ckpt.vocab
    obj = _read_patient(args.patients, args.patient)
    visits = obj.get("visits", [])
    if not 1 <= args.visit <= len(visits):
        raise CLIError("IndexError", f"visit {args.visit} out of range: patient has {len(visits)} visit(s)")
    encoded = []
    for v in visits[:args.visit]:
        ids = {}
        for t in CODE_TYPES:
            missing = [c for c in v.get(t, []) if vocab.get(t, c) is None]
            if missing:
                raise CLIError("VocabMismatch", f"{t} code(s) {missing} are unknown to the checkpoint")
            ids[t] = [vocab.id_of(t, c) for c in v.get(t, [])]
        encoded.append(Visit.from_ids(ids["diag"], ids["proc"], ids["med"]))
    if len(encoded) == 1:
        # later visits never influence earlier predictions, so a copy only satisfies the record invariant
        encoded.append(encoded[0])
    record = PatientRecord(str(obj.get("id")), tuple(encoded))
    params = ckpt.state.best_params if ckpt.state.best_params is not None else ckpt.params
    scores = model.predict(params, [record])[0][args.visit - 1]
    eta = ckpt.config.eta
    selected = set(np.flatnonzero(scores >= eta).tolist())
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    print(f"patient {record.patient_id} visit {args.visit} (eta={eta})")
    for i in order[:args.top]:
        mark = "*" if i in selected else " "
        print(f"{mark} {vocab.med[i]:<12} {scores[i]:.4f}")
    print("selected: " + ",".join(sorted(vocab.med[i] for i in selected)))
    truth = visits[args.visit - 1].get("med", [])
    if truth:
        true_ids = {vocab.id_of("med", c) for c in truth}
        hit, missed, unseen = selected & true_ids, true_ids - selected, selected - true_ids
        print(f"hit {len(hit)} missed {len(missed)} unseen {len(unseen)}")
        for label, ids in (("hit", hit), ("missed", missed), ("unseen", unseen)):
            print(f"{label}: " + ",".join(sorted(vocab.med[i] for i in ids)))
    return 0


def cmd_inspect_kg(args) -> int:
    if args.checkpoint:
        ckpt, inputs, model = _restore(args.checkpoint, {"ehr": args.ehr, "triples": args.triples,
                                                          "code_map": args.code_map})
        if not ckpt.config.use_kg:
            raise CLIError("ConfigError", "checkpoint was trained without the knowledge graph")
        best = ckpt.state.best_params
        num_filters, params = ckpt.config.num_filters, best if best is not None else ckpt.params
    else:
        if not (args.ehr and args.triples and args.code_map):
            raise CLIError("ConfigError", "without --checkpoint, --ehr, --triples and --code-map are required")
        inputs = load_inputs(args.ehr, args.triples, args.code_map, None, args.num_filters)
        num_filters, params = args.num_filters, None
    if ":" not in args.code:
        raise CLIError("ValueError", "code must look like TYPE:CODE, e.g. diag:401.9")
    ctype, code = args.code.split(":", 1)
    if ctype not in CODE_TYPES:
        raise CLIError("ValueError", f"unknown code type {ctype!r}")
    cid = inputs.vocab.get(ctype, code)
    if cid is None:
        raise CLIError("KeyError", f"unknown {ctype} code {code!r}")
    kg, index = inputs.kg, inputs.index
    row = code_offsets(inputs.vocab)[ctype] + cid
    concepts = index.pair_concepts[index.pair_codes == row].tolist()
    print(f"code {ctype}:{code} (row {row})")
    if not concepts:
        print("no concepts mapped; the code keeps its base embedding")
    else:
        print("concepts: " + ",".join(kg.concepts[u] for u in concepts))
    print(f"|N_c| = {len(index.n_c(row))} ({num_filters} filters x {len(concepts)} concepts)")
    if params is None:
        return 0
    rel = T.Tensor(params["kg.relation"])
    w = params["kg.filter_w"]
    f_embs = filter_embeddings(T.Tensor(w), rel)
    att = filter_attention(T.Tensor(params["kg.code"][row:row + 1]), f_embs).data[0]
    weights = np.exp(w - w.max(axis=1, keepdims=True))
    weights /= weights.sum(axis=1, keepdims=True)
    for i in range(num_filters):
        top = sorted(range(weights.shape[1]), key=lambda r: (-weights[i, r], r))[:args.top]
        rels = ", ".join(f"{kg.relations[r]} {weights[i, r]:.3f}" for r in top)
        print(f"filter {i}: attention {att[i]:.4f}; relation weights sum {weights[i].sum():.3f}; top: {rels}")
    return 0


# parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dkinet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic EHR + knowledge-graph dataset")
    p.add_argument("--out", default="synth", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="overwrite existing files")
    for f in fields(SynthSpec):
        kind = float if f.type in (float, "float") else int
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind, default=None,
                       help=f"default {f.default}")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a checkpoint directory")
    p.add_argument("--config", help="JSON file with config fields and/or input paths")
    p.add_argument("--ehr", default=None)
    p.add_argument("--triples", default=None)
    p.add_argument("--code-map", dest="code_map", default=None)
    p.add_argument("--ddi", default=None)
    p.add_argument("--out", default=None, help="checkpoint directory (default: run)")
    p.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")
    p.add_argument("--resume", action="store_true", help="continue the checkpoint in --out up to --epochs")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="bootstrap evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ehr", default=None, help="defaults to the training EHR file")
    p.add_argument("--triples", default=None)
    p.add_argument("--code-map", dest="code_map", default=None)
    p.add_argument("--ddi", default=None)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--no-resample", action="store_true", help="score the split as-is in every round")
    p.add_argument("--seed", type=int, default=None, help="bootstrap seed (default: the training seed)")
    p.add_argument("--params", choices=("best", "final"), default="best")
    p.add_argument("--out", default=None, help="report path (default: <checkpoint>/report_<split>.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="recommend medications for one visit of one patient")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--patients", required=True, help="JSON-lines file holding the patient")
    p.add_argument("--patient", default=None, help="patient id (default: first record)")
    p.add_argument("--visit", type=int, required=True, help="1-based visit index t")
    p.add_argument("--top", type=int, default=10, help="how many scored medications to list")
    p.add_argument("--ehr", default=None)
    p.add_argument("--triples", default=None)
    p.add_argument("--code-map", dest="code_map", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect-kg", help="show a code's concepts and, with a checkpoint, its filters")
    p.add_argument("--code", required=True, help="TYPE:CODE, e.g. diag:401.9")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--ehr", default=None)
    p.add_argument("--triples", default=None)
    p.add_argument("--code-map", dest="code_map", default=None)
    p.add_argument("--num-filters", type=int, default=4)
    p.add_argument("--top", type=int, default=2, help="relations listed per filter")
    p.set_defaults(func=cmd_inspect_kg)
    return parser


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        kind, msg = exc.kind, str(exc)
    except (FileNotFoundError, FileExistsError, EHRFormatError, ValueError, KeyError, IndexError,
            FloatingPointError) as exc:
        kind, msg = type(exc).__name__, exc.args[0] if exc.args else str(exc)
    print(f"error: {kind}: {_one_line(msg)}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
