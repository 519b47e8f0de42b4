"""Command line: ``apigraph <gen-corpus|train|embed|attack|defend|evaluate>``.

Every stage writes its artifacts atomically under ``--out`` and records the
hash of its inputs in ``<out>/stages/<stage>.json``; rerunning a stage whose
inputs are unchanged is a no-op unless ``--force`` is given.

Exit codes: 0 success, 1 validation error, 2 runtime or stage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import yaml

from . import classifiers as C
from . import gnn, pipeline
from .corpus import SyntheticSpec, generate_synthetic_corpus, load_corpus, write_corpus
from .errors import ApiGraphError, MissingDetector, MissingSamples, SpecInvalid, ValidationError
from .graphbuild import write_edge_list
from .vgae_malgan import GeneratorModel

log = logging.getLogger("apigraph")

STAGES = ("gen-corpus", "train", "embed", "attack", "defend", "evaluate")


# ---------------------------------------------------------------- files


def atomic_write(path: Path, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_tree(root: Path) -> str:
    """Hash of every regular file under ``root`` (relative paths and bytes)."""
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def sha256_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def fmt(x) -> str:
    return repr(float(x))


# ---------------------------------------------------------------- run context


def _rel(path: Path, root: Path) -> str:
    return os.path.relpath(Path(path).resolve(), Path(root).resolve()).replace(os.sep, "/")


class Run:
    def __init__(self, cfg: dict, force: bool):
        self.cfg = cfg
        self.force = force
        self.out = Path(cfg["paths"]["out"])
        self.corpus_root = Path(cfg["paths"]["corpus"] or self.out / "corpus")
        self._prep = None

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def stage_file(self, stage: str) -> Path:
        return self.path("stages", f"{stage}.json")

    def up_to_date(self, stage: str, input_hash: str) -> bool:
        f = self.stage_file(stage)
        if self.force or not f.exists():
            return False
        rec = json.loads(f.read_text())
        if rec.get("input_hash") != input_hash:
            return False
        return all((self.out / p).exists() and sha256_file(self.out / p) == h for p, h in rec.get("artifacts", {}).items())

    def record(self, stage: str, input_hash: str, artifacts) -> None:
        # paths relative to the output directory so records survive a move
        rec = {"input_hash": input_hash, "artifacts": {_rel(p, self.out): sha256_file(p) for p in artifacts}}
        atomic_write(self.stage_file(stage), dump_json(rec))

    def artifact_hash(self, stage: str) -> str:
        f = self.stage_file(stage)
        return sha256_file(f) if f.exists() else ""

    def corpus(self):
        if not (self.corpus_root / "index.jsonl").exists():
            raise SpecInvalid(f"no corpus at {self.corpus_root}; run gen-corpus first")
        return load_corpus(self.corpus_root, self.cfg["split_ratio"], self.cfg["seed"])

    def prep(self) -> pipeline.Prepared:
        if self._prep is None:
            self._prep = pipeline.prepare(self.corpus(), self.cfg["k_select"])
        return self._prep


# ---------------------------------------------------------------- commands


def cmd_gen_corpus(run: Run) -> str:
    spec = SyntheticSpec.from_dict(run.cfg["corpus"])
    spec.split_ratio = run.cfg["split_ratio"]
    spec.validate()
    key = sha256_obj({"spec": run.cfg["corpus"], "split_ratio": run.cfg["split_ratio"], "seed": run.cfg["seed"]})
    index = run.corpus_root / "index.jsonl"
    if run.up_to_date("gen-corpus", key):
        return f"corpus up to date at {run.corpus_root}"
    corpus = generate_synthetic_corpus(spec, run.cfg["seed"])
    if run.corpus_root.exists() and any(run.corpus_root.iterdir()):
        stale = {p.name for p in run.corpus_root.iterdir() if p.is_dir()} - {a.app_id for a in corpus.apps}
        if stale:
            raise SpecInvalid(f"{run.corpus_root} holds apps not in this corpus ({sorted(stale)[:3]}); use an empty directory")
    write_corpus(corpus, run.corpus_root)
    run.record("gen-corpus", key, [index])
    n_mal = sum(a.y for a in corpus.apps)
    return f"wrote {len(corpus.apps)} apps ({len(corpus.apps) - n_mal} benign, {n_mal} malware) to {run.corpus_root}"


def _train_key(run: Run) -> str:
    c = run.cfg
    return sha256_obj(
        {
            "corpus": sha256_tree(run.corpus_root),
            "seed": c["seed"],
            "split_ratio": c["split_ratio"],
            "k_select": c["k_select"],
            "gnn": c["gnn"],
            "classifier": c["classifier"],
        }
    )


def embeddings_csv(emb: dict[str, np.ndarray], labels: dict[str, int]) -> str:
    dim = len(next(iter(emb.values()))) if emb else gnn.EMBED_DIM
    rows = [[k] + [fmt(v) for v in emb[k]] + [labels[k]] for k in sorted(emb)]
    return csv_text(["app_id"] + [f"e{i}" for i in range(dim)] + ["label"], rows)


def cmd_train(run: Run) -> str:
    key = _train_key(run)
    if run.up_to_date("train", key):
        return "train artifacts up to date"
    prep = run.prep()
    trained = pipeline.run_train(prep, run.cfg)
    d = run.path("train")
    c = run.cfg["classifier"]
    labels = {a.app_id: a.y for a in prep.corpus.apps}
    files = {
        "vocab.json": dump_json({"apis": list(prep.vocab.names), "pi": list(prep.pi_vocab.entries)}),
        "selection.json": dump_json({"ids": list(prep.selected.ids), "weights": [prep.selected.weight[i] for i in prep.selected.ids]}),
        "global_graph.txt": write_edge_list(
            [(prep.global_graph.position[a], prep.global_graph.position[b]) for a, b in prep.global_graph.edges()],
            prep.global_graph.n,
        ),
        "centrality.csv": prep.table.to_csv(),
        "gnn_model.json": trained.gnn.to_json(),
        "pi_only_model.json": C.model_to_json(c["pi_only"], trained.pi_only),
        "pi_ge_model.json": C.model_to_json(c["pi_ge"], trained.pi_ge),
        "embeddings.csv": embeddings_csv(trained.embeddings, labels),
        "predictions.csv": csv_text(
            ["app_id", "label", "pred", "prob_malware"],
            [[a.app_id, a.y, int(p > 0.5), fmt(p)] for a, p in zip(prep.test_apps, trained.test_prob)],
        ),
        "metrics.json": dump_json(trained.metrics),
    }
    for name, text in files.items():
        atomic_write(d / name, text)
    run.record("train", key, [d / n for n in files])
    m = trained.metrics
    return f"pi_only F1 {m['pi_only']['f1']:.4f}  pi_ge F1 {m['pi_ge']['f1']:.4f}  gnn F1 {m['gnn']['f1']:.4f}"


def _load_trained(run: Run):
    d = run.path("train")
    need = [d / "gnn_model.json", d / "pi_ge_model.json"]
    missing = [p for p in need if not p.exists()]
    if missing:
        raise MissingDetector(f"no trained detector at {missing[0]}; run train first")
    return gnn.GnnModel.from_json(need[0].read_text()), C.model_from_json(need[1].read_text())


def cmd_embed(run: Run) -> str:
    model, _ = _load_trained(run)
    key = sha256_obj({"model": sha256_file(run.path("train", "gnn_model.json")), "corpus": sha256_tree(run.corpus_root)})
    out = run.path("embed", "embeddings.csv")
    if run.up_to_date("embed", key):
        return f"embeddings up to date at {out}"
    prep = run.prep()
    emb = gnn.embed_corpus(model, prep.train_data + prep.test_data)
    atomic_write(out, embeddings_csv(emb, {a.app_id: a.y for a in prep.corpus.apps}))
    run.record("embed", key, [out])
    return f"wrote {len(emb)} embeddings to {out}"


def _attack_key(run: Run) -> str:
    return sha256_obj({"train": run.artifact_hash("train"), "attack": run.cfg["attack"], "seed": run.cfg["seed"]})


def cmd_attack(run: Run) -> str:
    model, pi_ge = _load_trained(run)
    key = _attack_key(run)
    if run.up_to_date("attack", key):
        return "attack artifacts up to date"
    prep = run.prep()
    scenario = run.cfg["attack"]["scenario"]
    detector = pipeline.make_detector(prep, model, scenario, pi_ge)
    out = pipeline.run_attack(prep, detector, run.cfg)
    d = run.path("attack")
    written = []

    def put(rel, text):
        atomic_write(d / rel, text)
        written.append(d / rel)

    put("generator.json", out.result.generator.to_json())
    put("substitute.json", out.result.substitute.to_json())
    put(
        "history.csv",
        csv_text(
            ["epoch", "sd_loss", "gen_loss", "detector_recall_adv"],
            [[h["epoch"], fmt(h["sd_loss"]), fmt(h["gen_loss"]), fmt(h["detector_recall_adv"])] for h in out.result.history],
        ),
    )
    for s, before, after in zip(out.samples, out.labels_before, out.labels_after):
        r, c = np.nonzero(np.triu(s.adj, 1))
        put(f"adversarial/{s.source}.txt", write_edge_list(zip(r.tolist(), c.tolist()), s.n))
        side = {
            "source": s.source,
            "nodes": [int(v) for v in s.nodes],
            "n_added_nodes": s.n_added_nodes,
            "n_added_edges": s.n_added_edges,
            "detector_label_before": int(before),
            "detector_label_after": int(after),
        }
        put(f"adversarial/{s.source}.json", dump_json(side))
    put("report.json", dump_json(out.report))
    run.record("attack", key, written)
    rep = out.report
    return f"{scenario}: recall {rep['original_recall']:.4f} -> {rep['attacked_recall']:.4f}"


def cmd_defend(run: Run) -> str:
    gen_path = run.path("attack", "generator.json")
    if not gen_path.exists():
        raise MissingSamples(f"no attack artifacts at {gen_path}; run attack first")
    model, pi_ge = _load_trained(run)
    key = sha256_obj({"attack": run.artifact_hash("attack"), "defense": run.cfg["defense"], "gnn": run.cfg["gnn"]})
    if run.up_to_date("defend", key):
        return "defense artifacts up to date"
    prep = run.prep()
    generator = GeneratorModel.from_json(gen_path.read_text())
    out = pipeline.run_defense(prep, model, pi_ge, generator, run.cfg)
    d = run.path("defend")
    files = {"hardened_gnn.json": out.gnn.to_json(), "report.json": dump_json(out.report)}
    if out.classifier is not None:
        files["hardened_classifier.json"] = C.model_to_json(run.cfg["classifier"]["pi_ge"], out.classifier)
    for name, text in files.items():
        atomic_write(d / name, text)
    run.record("defend", key, [d / n for n in files])
    rep = out.report
    return f"clean F1 {rep['clean']['f1']:.4f} (before {rep['pre_attack_clean']['f1']:.4f}); adversarial recall {rep['adversarial_recall']:.4f}"


def cmd_evaluate(run: Run) -> str:
    parts = {"metrics": run.path("train", "metrics.json"), "attack": run.path("attack", "report.json"), "defense": run.path("defend", "report.json")}
    if not parts["metrics"].exists():
        raise MissingDetector(f"no metrics at {parts['metrics']}; run train first")
    summary = {k: json.loads(p.read_text()) for k, p in parts.items() if p.exists()}
    atomic_write(run.path("evaluation.json"), dump_json(summary))
    lines = [f"{k}: {p}" for k, p in parts.items() if p.exists()]
    return "summary of " + ", ".join(lines)


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "embed": cmd_embed,
    "attack": cmd_attack,
    "defend": cmd_defend,
    "evaluate": cmd_evaluate,
}


# ---------------------------------------------------------------- entry point


def load_config(path, seed=None, out=None) -> dict:
    user = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise SpecInvalid(f"config file {p} does not exist")
        try:
            user = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise SpecInvalid(f"config file {p} is not valid YAML: {e}")
        if not isinstance(user, dict):
            raise SpecInvalid(f"config file {p} must hold a mapping")
    cfg = pipeline.merge_config(user)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["paths"]["out"] = str(out)
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise SpecInvalid("seed must be a nonnegative integer")
    return cfg


def _common_flags(parser: argparse.ArgumentParser, default) -> None:
    # subcommand copies default to SUPPRESS so flags given before the
    # subcommand are not overwritten
    parser.add_argument("--config", default=default, help="YAML (or JSON) run configuration")
    parser.add_argument("--seed", type=int, default=default, help="override the configured seed")
    parser.add_argument("--force", action="store_true", default=default or False, help="rerun even when inputs are unchanged")
    parser.add_argument("--out", default=default, help="artifact directory (overrides paths.out)")
    parser.add_argument("-v", "--verbose", action="store_true", default=default or False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apigraph", description=__doc__.splitlines()[0])
    _common_flags(parser, None)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        _common_flags(sub.add_parser(name), argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    stage = args.command
    try:
        cfg = load_config(args.config, args.seed, args.out)
        run = Run(cfg, args.force)
        msg = COMMANDS[stage](run)
    except ValidationError as e:
        print(f"error [{stage}]: {e}", file=sys.stderr)
        return 1
    except (ApiGraphError, OSError, ValueError, KeyError) as e:
        print(f"error [{stage}]: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    print(msg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
