"""Experiment runs on disk: config validation, execution with resume, reports, verification.

Run directory layout::

    manifest.json
    stages/NNN/report.json
    stages/NNN/topology.dot      (tree runs)
    stages/NNN/tree.json         (tree runs: topology + per-node spec/checksum)
    stages/NNN/baseline.json     (baseline runs)
    checkpoints/<node-id>.bin    (latest weights of every node)
    checkpoints/by-checksum/     (every saved version, for resume)
    report/{effort,accuracy}.{csv,json}
"""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import os

import numpy as np

from treecnn import data as dio
from treecnn import trainer
from treecnn.growth import GrowthConfig
from treecnn.nn import checkpoint, zoo
from treecnn.nn.network import TrainingSchedule
from treecnn.nn.spec import NetworkSpec, count_weights
from treecnn.stubs import OracleRouter, encode_labels
from treecnn.tree import predict_batch, to_dot, topology_dict, tree_from_dict, validate_tree

log = logging.getLogger(__name__)

MODELS = ("tree",) + tuple(zoo.BASELINE_MODES)
DATASETS = ("digits", "idx", "cifar10", "cifar100")


class ConfigError(ValueError):
    """Invalid run config; ``errors`` lists ``(field, message)`` pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{f}: {m}" for f, m in self.errors))


class RunError(RuntimeError):
    pass


DEFAULTS = {
    "seed": 0,
    "model": "tree",
    "dataset": {"kind": "digits", "downsample": 1, "gcn": True, "zca": False, "zca_reg": 1e-2},
    "schedule": None,
    "initial_tree": None,
    "nodes": {
        "root": "cifar100-root",
        "branch": "cifar100-branch",
        "root_shrink": 1,
        "branch_shrink": 1,
        "root_fc_shrink": None,
        "branch_fc_shrink": None,
    },
    "baseline": {"shrink": 1, "fc_shrink": None},
    "growth": {"alpha": 0.1, "beta": 0.1, "max_children": 5, "max_depth": 2},
    "training": {},
    "branch_training": None,
    "probe": {"fraction": 0.1, "count": None},
    "effort_reference": None,
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def normalize_config(raw):
    """Fill defaults and validate; raises :class:`ConfigError` listing every bad field."""
    if not isinstance(raw, dict):
        raise ConfigError([("<root>", "config must be a JSON object")])
    unknown = sorted(set(raw) - set(DEFAULTS) - {"run_id"})
    errors = [(k, "unknown field") for k in unknown]
    cfg = _merge(DEFAULTS, raw)

    if not isinstance(cfg["seed"], int):
        errors.append(("seed", "must be an integer"))
    if cfg["model"] not in MODELS:
        errors.append(("model", f"must be one of {list(MODELS)}"))
    ds = cfg["dataset"]
    if ds.get("kind") not in DATASETS:
        errors.append(("dataset.kind", f"must be one of {list(DATASETS)}"))
    if ds.get("kind") in ("cifar10", "cifar100"):
        for key in ("train", "test"):
            if key not in ds:
                errors.append((f"dataset.{key}", "required for CIFAR datasets"))
    if ds.get("kind") == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if key not in ds:
                errors.append((f"dataset.{key}", "required for IDX datasets"))
    if not isinstance(ds.get("downsample"), int) or ds["downsample"] < 1:
        errors.append(("dataset.downsample", "must be a positive integer"))
    if cfg["schedule"] is None:
        errors.append(("schedule", "required: bundled name, file path or list of class groups"))
    elif isinstance(cfg["schedule"], list):
        if not cfg["schedule"] or not all(isinstance(g, list) and g for g in cfg["schedule"]):
            errors.append(("schedule", "must be a non-empty list of non-empty class groups"))
    elif not isinstance(cfg["schedule"], str):
        errors.append(("schedule", "must be a string or a list of groups"))

    nodes = cfg["nodes"]
    for key in ("root", "branch"):
        if nodes.get(key) not in zoo.ARCHITECTURES:
            errors.append((f"nodes.{key}", f"must be one of {sorted(zoo.ARCHITECTURES)}"))
    for key in ("root_shrink", "branch_shrink"):
        if not isinstance(nodes.get(key), int) or nodes[key] < 1:
            errors.append((f"nodes.{key}", "must be a positive integer"))
    if not isinstance(cfg["baseline"].get("shrink"), int) or cfg["baseline"]["shrink"] < 1:
        errors.append(("baseline.shrink", "must be a positive integer"))

    try:
        GrowthConfig(**cfg["growth"])
    except (TypeError, ValueError) as exc:
        errors.append(("growth", str(exc)))
    for key in ("training", "branch_training"):
        if cfg[key] is None:
            continue
        try:
            TrainingSchedule.from_dict(cfg[key])
        except (TypeError, ValueError) as exc:
            errors.append((key, str(exc)))
    probe = cfg["probe"]
    frac = probe.get("fraction")
    if not isinstance(frac, (int, float)) or not 0 < frac <= 1:
        errors.append(("probe.fraction", "must lie in (0, 1]"))
    if probe.get("count") is not None and (not isinstance(probe["count"], int) or probe["count"] < 1):
        errors.append(("probe.count", "must be a positive integer"))
    ref = cfg["effort_reference"]
    if ref is not None and (not isinstance(ref, (int, float)) or ref <= 0):
        errors.append(("effort_reference", "must be a positive number or null"))
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path):
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([("<file>", f"not valid JSON: {exc}")]) from None
    return raw


def apply_overrides(raw, epochs=None, downsample=None, shrink=None, seed=None, schedule=None, data_dir=None):
    """Desk-scale switches and common flags folded into the raw config."""
    cfg = copy.deepcopy(raw)
    if epochs is not None:
        for key in ("training", "branch_training"):
            if key == "training" or cfg.get(key):
                cfg.setdefault(key, {})
                cfg[key] = dict(cfg[key] or {}, epochs=epochs)
    if downsample is not None:
        cfg.setdefault("dataset", {})["downsample"] = downsample
    if shrink is not None:
        nodes = cfg.setdefault("nodes", {})
        nodes["root_shrink"] = nodes["branch_shrink"] = shrink
        cfg.setdefault("baseline", {})["shrink"] = shrink
    if seed is not None:
        cfg["seed"] = seed
    if schedule is not None:
        cfg["schedule"] = schedule
    if data_dir is not None:
        ds = cfg.setdefault("dataset", {})
        for key in ("train", "test", "train_images", "train_labels", "test_images", "test_labels"):
            if key not in ds:
                continue
            val = ds[key]
            if isinstance(val, list):
                ds[key] = [os.path.join(data_dir, v) for v in val]
            else:
                ds[key] = os.path.join(data_dir, val)
    return cfg


# ------------------------------------------------------------------ data


def load_dataset(ds):
    """``(train, test)`` raw splits for a validated dataset config."""
    kind = ds["kind"]
    if kind == "digits":
        train, test = dio.make_digits(seed=ds.get("split_seed", 0))
    elif kind == "idx":
        names = tuple(ds["class_names"]) if ds.get("class_names") else None
        train = dio.load_idx(ds["train_images"], ds["train_labels"], "train", names)
        test = dio.load_idx(ds["test_images"], ds["test_labels"], "test", names)
    else:
        variant = 10 if kind == "cifar10" else 100
        paths = ds["train"] if isinstance(ds["train"], list) else [ds["train"]]
        parts = [dio.load_cifar(p, variant, "train") for p in paths]
        train = dio.DatasetSplit(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
            "train",
            parts[0].class_names,
        )
        test = dio.load_cifar(ds["test"], variant, "test")
    factor = ds.get("downsample", 1)
    return dio.downsample(train, factor), dio.downsample(test, factor)


def resolve_schedule(cfg, class_names):
    sched = cfg["schedule"]
    if isinstance(sched, list):
        return dio.ClassSchedule([[int(c) if isinstance(c, int) else _name_to_label(c, class_names) for c in g] for g in sched])
    return dio.load_schedule(sched, class_names)


def _name_to_label(name, class_names):
    text = dio.parse_schedule(f"0: {name}", class_names)
    return text.groups[0][0]


def prepare_data(cfg):
    """Raw splits, schedule and preprocessed float splits.

    Preprocessing statistics come from the training images of the initial
    class group only: that is all the data the system owns at stage 0.
    """
    train, test = load_dataset(cfg["dataset"])
    schedule = resolve_schedule(cfg, train.class_names)
    present = set(train.classes())
    missing = [c for c in schedule.classes_through(len(schedule) - 1) if c not in present]
    if missing:
        raise ConfigError([("schedule", f"classes {missing} have no training images")])
    ds = cfg["dataset"]
    stats = dio.fit_preprocess(train.restrict(schedule.groups[0]), gcn=ds["gcn"], zca=ds["zca"], zca_reg=ds["zca_reg"])
    return schedule, dio.preprocess(train, stats), dio.preprocess(test, stats)


# -------------------------------------------------------------- builders


def node_factory(cfg, input_shape):
    n = cfg["nodes"]
    return trainer.NodeFactory(
        input_shape=tuple(input_shape),
        root_arch=n["root"],
        branch_arch=n["branch"],
        root_shrink=n["root_shrink"],
        branch_shrink=n["branch_shrink"],
        root_fc_shrink=n["root_fc_shrink"],
        branch_fc_shrink=n["branch_fc_shrink"],
        seed=cfg["seed"],
    )


def schedules(cfg):
    root = TrainingSchedule.from_dict(cfg["training"])
    branch = TrainingSchedule.from_dict(cfg["branch_training"]) if cfg["branch_training"] else root
    return root, branch


def effort_reference(cfg, schedule, train):
    """Normalisation constant: the configured value or B:V effort at the final stage."""
    if cfg["effort_reference"] is not None:
        return float(cfg["effort_reference"])
    classes = schedule.classes_through(len(schedule) - 1)
    n = len(train.restrict(classes))
    b = cfg["baseline"]
    return float(trainer.baseline_effort(len(classes), n, "B:V", train.images.shape[1:], b["shrink"], b["fc_shrink"]))


# ------------------------------------------------------------------- disk


def _write_json(path, obj):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def stage_dir(run_dir, stage):
    return os.path.join(run_dir, "stages", f"{stage:03d}")


def _versioned(run_dir, name, checksum):
    return os.path.join(run_dir, "checkpoints", "by-checksum", f"{name}-{checksum[:16]}.bin")


def _save_checkpoint(run_dir, name, net):
    """Latest weights at ``checkpoints/<name>.bin`` plus a checksum-named copy,
    so an interrupted stage never clobbers what the previous stage needs."""
    path = os.path.join(run_dir, "checkpoints", f"{name}.bin")
    kept = _versioned(run_dir, name, net.checksum())
    os.makedirs(os.path.dirname(kept), exist_ok=True)
    if not os.path.exists(kept):
        checkpoint.save(net, kept + ".tmp")
        os.replace(kept + ".tmp", kept)
    tmp = path + ".tmp"
    checkpoint.save(net, tmp)
    os.replace(tmp, path)


def _load_checkpoint(run_dir, name, spec, checksum):
    for path in (os.path.join(run_dir, "checkpoints", f"{name}.bin"), _versioned(run_dir, name, checksum)):
        if not os.path.exists(path):
            continue
        try:
            net = checkpoint.load(path, spec)
        except checkpoint.CheckpointError:
            continue  # a later stage resized this node
        if net.checksum() == checksum:
            return net
    raise RunError(f"no checkpoint of {name} matches checksum {checksum[:16]}")


def _tree_meta(node):
    net = node.classifier
    return {"spec": net.spec.to_dict(), "checksum": net.checksum()}


def save_tree_stage(run_dir, tree, report, retrained):
    d = stage_dir(run_dir, report.stage)
    os.makedirs(d, exist_ok=True)
    for nid in retrained:
        _save_checkpoint(run_dir, str(nid), tree.node(nid).classifier)
    _write_json(os.path.join(d, "tree.json"), topology_dict(tree, _tree_meta))
    with open(os.path.join(d, "topology.dot"), "w") as fh:
        fh.write(to_dot(tree, title=f"stage {report.stage}"))
    _write_json(os.path.join(d, "report.json"), report.to_dict())


def save_baseline_stage(run_dir, state, report):
    d = stage_dir(run_dir, report.stage)
    os.makedirs(d, exist_ok=True)
    _save_checkpoint(run_dir, "baseline", state.net)
    _write_json(
        os.path.join(d, "baseline.json"),
        {"classes": list(state.classes), "spec": state.net.spec.to_dict(), "checksum": state.net.checksum()},
    )
    _write_json(os.path.join(d, "report.json"), report.to_dict())


def load_tree_stage(run_dir, stage, factory=None, with_weights=True):
    d = _read_json(os.path.join(stage_dir(run_dir, stage), "tree.json"))

    def load_classifier(nd):
        return _load_checkpoint(run_dir, str(nd["id"]), NetworkSpec.from_dict(nd["spec"]), nd["checksum"])

    return tree_from_dict(d, load_classifier if with_weights else None, factory=factory)


def load_baseline_stage(run_dir, stage, cfg, input_shape):
    d = _read_json(os.path.join(stage_dir(run_dir, stage), "baseline.json"))
    net = _load_checkpoint(run_dir, "baseline", NetworkSpec.from_dict(d["spec"]), d["checksum"])
    b = cfg["baseline"]
    return trainer.BaselineState(net, list(d["classes"]), tuple(input_shape), b["shrink"], b["fc_shrink"], cfg["seed"])


# -------------------------------------------------------------------- run


def execute_run(raw_config, run_dir, progress=None):
    """Run (or resume) every stage of the configured experiment; returns the manifest."""
    cfg = normalize_config(raw_config)
    os.makedirs(os.path.join(run_dir, "stages"), exist_ok=True)
    os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
    manifest_path = os.path.join(run_dir, "manifest.json")
    if os.path.exists(manifest_path):
        manifest = _read_json(manifest_path)
        if manifest.get("config") != cfg:
            raise RunError(f"{run_dir} holds a run with a different config; use a fresh directory")
    else:
        manifest = {
            "run_id": raw_config.get("run_id") or os.path.basename(os.path.abspath(run_dir)),
            "config": cfg,
            "stages": [],
            "status": "running",
        }
        _write_json(manifest_path, manifest)

    schedule, train, test = prepare_data(cfg)
    manifest["schedule"] = [list(g) for g in schedule.groups]
    reference = effort_reference(cfg, schedule, train)
    manifest["effort_reference"] = reference
    input_shape = train.images.shape[1:]
    manifest["input_shape"] = list(input_shape)
    root_sched, branch_sched = schedules(cfg)
    growth_cfg = GrowthConfig(**dict(cfg["growth"], seed=cfg["seed"]))
    done = len(manifest["stages"])
    say = progress or (lambda msg: None)

    model = None
    if done:
        if cfg["model"] == "tree":
            model = load_tree_stage(run_dir, done - 1, node_factory(cfg, input_shape))
        else:
            model = load_baseline_stage(run_dir, done - 1, cfg, input_shape)
        say(f"resuming after stage {done - 1}")

    for t in range(done, len(schedule)):
        cum_train, _ = dio.stage_slices(train, schedule, t)
        cum_test, _ = dio.stage_slices(test, schedule, t)
        say(f"stage {t}: classes {list(schedule.groups[t])}")
        if cfg["model"] == "tree":
            model, report, retrained = _tree_stage(cfg, t, model, schedule, cum_train, cum_test, input_shape,
                                                   root_sched, branch_sched, growth_cfg)
            report.effort_normalized = report.effort / reference
            save_tree_stage(run_dir, model, report, retrained)
        else:
            if model is None:
                b = cfg["baseline"]
                model = trainer.BaselineState(None, [], tuple(input_shape), b["shrink"], b["fc_shrink"], cfg["seed"])
            model, report = trainer.run_baseline_stage(
                model, cfg["model"], cum_train, cum_test, root_sched, new_classes=list(schedule.groups[t]), stage=t
            )
            report.effort_normalized = report.effort / reference
            save_baseline_stage(run_dir, model, report)
        manifest["stages"].append(
            {
                "stage": t,
                "report": os.path.join("stages", f"{t:03d}", "report.json"),
                "effort": report.effort,
                "samples": len(cum_train),
            }
        )
        _write_json(manifest_path, manifest)
        say(f"stage {t}: accuracy {report.accuracy:.2f}%  effort {report.effort}")
    manifest["status"] = "complete"
    _write_json(manifest_path, manifest)
    return manifest


def _tree_stage(cfg, t, tree, schedule, train, test, input_shape, root_sched, branch_sched, growth_cfg):
    factory = node_factory(cfg, input_shape)
    if t == 0:
        groups = cfg["initial_tree"] or [[c] for c in schedule.groups[0]]
        if sorted(c for g in groups for c in g) != sorted(schedule.groups[0]):
            raise ConfigError([("initial_tree", "must partition exactly the classes of schedule group 0")])
        tree = trainer.build_initial_tree(groups, factory, growth_cfg, train.class_names, cfg["seed"])
        tree, report = trainer.train_initial_tree(tree, train, test, root_sched, branch_sched, cfg["seed"])
    else:
        stage_cfg = trainer.StageConfig(
            new_classes=list(schedule.groups[t]),
            growth=growth_cfg,
            root_schedule=root_sched,
            branch_schedule=branch_sched,
            probe_fraction=cfg["probe"]["fraction"],
            probe_count=cfg["probe"]["count"],
            seed=cfg["seed"],
            stage=t,
        )
        tree, report = trainer.run_incremental_stage(tree, stage_cfg, train, test)
    return tree, report, [r.node for r in report.retrained]


# ----------------------------------------------------------------- report


def _manifest(run_dir):
    path = os.path.join(run_dir, "manifest.json")
    if not os.path.exists(path):
        raise RunError(f"{run_dir}: manifest.json missing")
    try:
        m = _read_json(path)
    except json.JSONDecodeError as exc:
        raise RunError(f"{run_dir}: manifest.json is corrupt ({exc})") from None
    for key in ("config", "stages"):
        if key not in m:
            raise RunError(f"{run_dir}: manifest lacks {key!r}")
    missing = [s["report"] for s in m["stages"] if not os.path.exists(os.path.join(run_dir, s["report"]))]
    if missing:
        raise RunError(f"{run_dir}: missing artifacts: {', '.join(missing)}")
    return m


def stage_reports(run_dir):
    m = _manifest(run_dir)
    return m, [trainer.StageReport.from_dict(_read_json(os.path.join(run_dir, s["report"]))) for s in m["stages"]]


def _simulated_baselines(cfg, report, samples, input_shape):
    b = cfg["baseline"]
    n = len(report.classes_so_far)
    return {m: trainer.baseline_effort(n, samples, m, input_shape, b["shrink"], b["fc_shrink"]) for m in zoo.BASELINE_MODES}


def build_tables(run_dir):
    """Effort rows (simulated B:I..B:V next to the run's own effort) and accuracy rows."""
    m, reports = stage_reports(run_dir)
    cfg = m["config"]
    ref = m.get("effort_reference")
    model_col = f"Tree-CNN-{cfg['growth']['max_children']}" if cfg["model"] == "tree" else f"{cfg['model']} (run)"
    input_shape = tuple(m.get("input_shape") or ())
    effort_rows, acc_rows = [], []
    for entry, r in zip(m["stages"], reports):
        samples = entry.get("samples", 0)
        row = {"stage": r.stage, "classes": len(r.classes_so_far)}
        if input_shape:
            sim = _simulated_baselines(cfg, r, samples, input_shape)
            for mode, e in sim.items():
                row[mode] = e / ref if ref else float(e)
        row[model_col] = r.effort / ref if ref else float(r.effort)
        row["raw_effort"] = r.effort
        effort_rows.append(row)
        acc_rows.append({"stage": r.stage, "classes": len(r.classes_so_far), "accuracy": r.accuracy,
                         "accuracy_old": r.accuracy_old})
    return effort_rows, acc_rows


def _csv(rows):
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else ("" if v is None else v)) for k, v in row.items()})
    return buf.getvalue()


def write_report(run_dir):
    effort_rows, acc_rows = build_tables(run_dir)
    out = os.path.join(run_dir, "report")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "effort.csv"), "w") as fh:
        fh.write(_csv(effort_rows))
    with open(os.path.join(out, "accuracy.csv"), "w") as fh:
        fh.write(_csv(acc_rows))
    _write_json(os.path.join(out, "effort.json"), effort_rows)
    _write_json(os.path.join(out, "accuracy.json"), acc_rows)
    return out


# ----------------------------------------------------------------- verify


def verify_run(run_dir):
    """``[(check, ok, detail)]`` for a run directory; never raises on bad content."""
    checks = []
    try:
        m, reports = stage_reports(run_dir)
    except (RunError, OSError, KeyError, TypeError, ValueError) as exc:
        return [("manifest", False, str(exc))]
    checks.append(("manifest", True, f"{len(reports)} stage(s)"))
    cfg = m["config"]
    ref = m.get("effort_reference")
    for entry, r in zip(m["stages"], reports):
        t = r.stage
        recomputed = sum(rec.weights * rec.samples for rec in r.retrained)
        ok = recomputed == r.effort == entry.get("effort", r.effort)
        checks.append((f"stage {t}: effort arithmetic", ok, f"sum={recomputed} report={r.effort} manifest={entry.get('effort')}"))
        if ref and r.effort_normalized is not None:
            ok = abs(r.effort_normalized - r.effort / ref) <= 1e-12 * max(1.0, r.effort / ref)
            checks.append((f"stage {t}: normalized effort", ok, f"{r.effort_normalized} vs {r.effort / ref}"))
        if cfg["model"] == "tree":
            checks.extend(_verify_tree_stage(run_dir, t, r))
        else:
            path = os.path.join(stage_dir(run_dir, t), "baseline.json")
            if not os.path.exists(path):
                checks.append((f"stage {t}: baseline snapshot", False, "baseline.json missing"))
                continue
            d = _read_json(path)
            spec = NetworkSpec.from_dict(d["spec"])
            subset = None if t == 0 else zoo.BASELINE_MODES[cfg["model"]]
            ok = all(rec.weights == count_weights(spec, subset) for rec in r.retrained)
            checks.append((f"stage {t}: baseline weight count", ok, ""))
    if reports:
        checks.append(_verify_checkpoints(run_dir, cfg, reports[-1].stage))
    return checks


def _verify_tree_stage(run_dir, t, report):
    out = []
    path = os.path.join(stage_dir(run_dir, t), "tree.json")
    if not os.path.exists(path):
        return [(f"stage {t}: tree snapshot", False, "tree.json missing")]
    d = _read_json(path)
    try:
        tree = tree_from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        return [(f"stage {t}: tree snapshot", False, str(exc))]
    problems = validate_tree(tree)
    out.append((f"stage {t}: tree invariants", not problems, "; ".join(problems)))
    if not problems:
        # label-transform round trip with perfect routers
        for node in tree.internal_nodes():
            node.classifier = OracleRouter(tree, node.id)
        classes = tree.classes()
        pred = predict_batch(tree, encode_labels(classes))
        bad = [c for c, p in zip(classes, pred) if c != p]
        out.append((f"stage {t}: label-transform round trip", not bad, f"misrouted {bad}" if bad else ""))
    if sorted(tree.classes()) != sorted(report.classes_so_far):
        out.append((f"stage {t}: class set", False, "tree leaves differ from the report's classes"))
    nodes = {nd["id"]: nd for nd in d["nodes"]}
    bad = []
    for rec in report.retrained:
        nd = nodes.get(rec.node)
        if nd is None or "spec" not in nd or count_weights(NetworkSpec.from_dict(nd["spec"])) != rec.weights:
            bad.append(rec.node)
    out.append((f"stage {t}: node weight counts", not bad, f"nodes {bad}" if bad else ""))
    return out


def _verify_checkpoints(run_dir, cfg, last):
    try:
        if cfg["model"] == "tree":
            load_tree_stage(run_dir, last)
        else:
            d = _read_json(os.path.join(stage_dir(run_dir, last), "baseline.json"))
            _load_checkpoint(run_dir, "baseline", NetworkSpec.from_dict(d["spec"]), d["checksum"])
    except (RunError, checkpoint.CheckpointError, OSError) as exc:
        return ("checkpoints", False, str(exc))
    return ("checkpoints", True, f"match stage {last}")


def export_dot(run_dir, stage=None):
    m = _manifest(run_dir)
    if m["config"]["model"] != "tree":
        raise RunError("baseline runs have no tree topology")
    if not m["stages"]:
        raise RunError("run has no completed stage")
    stage = m["stages"][-1]["stage"] if stage is None else stage
    d = _read_json(os.path.join(stage_dir(run_dir, stage), "tree.json"))
    return to_dot(tree_from_dict(d), title=f"stage {stage}")
