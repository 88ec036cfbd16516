"""Experiment config files, the on-disk artifact store and the pipeline stages."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import SUCCESS
from .env import (
    FAILURE_MODES, DatasetManifest, WorldState, file_sha256, generate_dataset, load_demos, save_demos,
)
from .errors import ConfigError, IntegrityError
from .evaluation import EvalReport, PCAPlot, embed, emit_report, evaluate, pca_project
from .model import PolicyConfig, load_checkpoint
from .selection import (
    STRATEGIES, build_plan, mode_means, read_scores_csv, reconstruct_manifest, score_all,
    scores_digest, write_scores_csv,
)
from .training import train

log = logging.getLogger(__name__)

_POLICY_DEFAULTS = {f.name: f.default for f in dataclasses.fields(PolicyConfig) if f.name != "seed"}

DEFAULTS = {
    "run": {
        "out": "runs/default",
        "seeds": (0, 1, 2, 3, 4),
        "conditions": ("act-ds", "act-full", "prop-ds", "prop-full"),
        "jobs": 1,
    },
    "data": {
        "n_success": 50,
        "n_failure": 50,
        "seed": 0,
        "failure_mix": "miss:1, early_release:1, wander:1",
    },
    "policy": _POLICY_DEFAULTS,
    "selection": {
        "strategies": STRATEGIES,
        "subset_size": 10,
        "random_subsets": 5,
        "random_seed": 0,
    },
    "eval": {
        "n_rollouts": 100,
        "env_seed_base": 1000,
        "max_steps": 60,
    },
}

# condition -> (model label, dataset label, PB + KL enabled, success demos only)
CONDITIONS = {
    "act-ds": ("ACT", "D_S", False, True),
    "act-full": ("ACT", "D_S+D_F", False, False),
    "prop-ds": ("Proposed", "D_S", True, True),
    "prop-full": ("Proposed", "D_S+D_F", True, False),
}
PROCESS_ONE = "prop-full"
CONFIG_NAME = "config.ini"
INDEX_NAME = "index.json"
DATASET_REL = "data/demos.jsonl"  # manifests on disk name the dataset relative to the store root


def _coerce(section, key, default, raw):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            b = configparser.ConfigParser.BOOLEAN_STATES.get(raw.lower())
            if b is None:
                raise ValueError(raw)
            return b
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            return tuple(int(x) for x in items) if default and isinstance(default[0], int) else tuple(items)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None
    return raw


def _render(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(x) for x in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    """Fully defaulted experiment settings; ``values[section][key]``."""

    values: dict

    @classmethod
    def defaults(cls):
        return cls({s: dict(kv) for s, kv in DEFAULTS.items()})

    @classmethod
    def from_text(cls, text, source="<config>"):
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            cp.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}".replace("\n", " ")) from None
        cfg = cls.defaults()
        for section in cp.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"{source}: unknown section [{section}]")
            for key, raw in cp.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
                cfg.values[section][key] = _coerce(section, key, DEFAULTS[section][key], raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None):
        if path is None:
            return cls.defaults()
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        return cls.from_text(path.read_text(), str(path))

    def override(self, section, key, value):
        self.values[section][key] = value
        self.validate()

    def validate(self):
        self.policy_config()
        self.failure_mix()
        run, sel, ev = self["run"], self["selection"], self["eval"]
        if not run["seeds"] or len(set(run["seeds"])) != len(run["seeds"]):
            raise ConfigError("[run] seeds must be a non-empty list of distinct integers")
        bad = [c for c in run["conditions"] if c not in CONDITIONS]
        if bad or not run["conditions"]:
            raise ConfigError(f"[run] conditions must come from {sorted(CONDITIONS)}")
        bad = [s for s in sel["strategies"] if s not in STRATEGIES]
        if bad:
            raise ConfigError(f"[selection] unknown strategies {bad}")
        if sel["subset_size"] < 0 or sel["random_subsets"] < 0 or run["jobs"] < 1:
            raise ConfigError("subset_size and random_subsets must be >= 0 and jobs >= 1")
        if ev["n_rollouts"] < 1 or ev["max_steps"] < 1:
            raise ConfigError("[eval] n_rollouts and max_steps must be >= 1")
        if self["data"]["n_success"] < 1:
            raise ConfigError("[data] n_success must be >= 1")

    def __getitem__(self, section):
        return self.values[section]

    def policy_config(self, **kw):
        return PolicyConfig(**{**self["policy"], **kw})

    def failure_mix(self):
        mix = {}
        for part in self["data"]["failure_mix"].split(","):
            if not part.strip():
                continue
            name, _, w = part.partition(":")
            name = name.strip()
            if name not in FAILURE_MODES:
                raise ConfigError(f"[data] failure_mix: unknown mode {name!r}")
            try:
                mix[name] = float(w)
            except ValueError:
                raise ConfigError(f"[data] failure_mix: bad weight for {name!r}") from None
        total = sum(mix.values())
        if not mix or total <= 0 or min(mix.values()) < 0:
            raise ConfigError("[data] failure_mix needs positive weights")
        return {k: v / total for k, v in mix.items()}

    def to_ini(self):
        lines = []
        for section in DEFAULTS:
            lines.append(f"[{section}]")
            lines += [f"{k} = {_render(v)}" for k, v in self.values[section].items()]
            lines.append("")
        return "\n".join(lines)

    def digest(self):
        # out is where results go, not what they are
        body = self.to_ini().replace(f"out = {self['run']['out']}\n", "")
        return hashlib.sha256(body.encode()).hexdigest()


# ------------------------------------------------------------------ store


class ArtifactStore:
    """Flat directory of artifacts plus ``index.json`` (path, kind, sha256, config hash)."""

    def __init__(self, root, config):
        self.root = Path(root)
        self.config = config

    @property
    def index_path(self):
        return self.root / INDEX_NAME

    def path(self, *parts):
        return self.root.joinpath(*parts)

    def read_index(self):
        if not self.index_path.exists():
            return {}
        try:
            data = json.loads(self.index_path.read_text())
        except json.JSONDecodeError as exc:
            raise IntegrityError(f"{self.index_path} is not valid JSON: {exc}") from None
        return {e["path"]: e for e in data.get("artifacts", [])}

    def _write_index(self, entries):
        self.root.mkdir(parents=True, exist_ok=True)
        body = {"config_hash": self.config.digest(), "artifacts": [entries[k] for k in sorted(entries)]}
        self.index_path.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")

    def record(self, paths, kind):
        entries = self.read_index()
        h = self.config.digest()
        for p in paths:
            rel = Path(p).resolve().relative_to(self.root.resolve()).as_posix()
            entries[rel] = {"path": rel, "kind": kind, "sha256": file_sha256(p), "config_hash": h}
        self._write_index(entries)

    def forget(self, prefix):
        entries = {k: v for k, v in self.read_index().items() if not k.startswith(prefix)}
        self._write_index(entries)

    def echo_config(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        p = d / CONFIG_NAME
        p.write_text(self.config.to_ini())
        return p

    def verify(self):
        """Problems with the index: missing files, changed files, foreign config hashes."""
        problems = []
        h = self.config.digest()
        for rel, e in sorted(self.read_index().items()):
            p = self.root / rel
            if not p.exists():
                problems.append(f"dangling: {rel}")
            elif file_sha256(p) != e["sha256"]:
                problems.append(f"modified: {rel}")
            elif e["config_hash"] != h:
                problems.append(f"stale config: {rel}")
        return problems

    def require(self, rel, stage):
        p = self.root / rel
        if not p.exists():
            raise IntegrityError(f"missing {p}: run {stage} first")
        return p


# ------------------------------------------------------------------ stages


def gen_data(store):
    cfg = store.config
    d = cfg["data"]
    out = store.path("data")
    out.mkdir(parents=True, exist_ok=True)
    demos_path = store.path(DATASET_REL)
    demos, full = generate_dataset(d["n_success"], d["n_failure"], cfg.failure_mix(), d["seed"],
                                   dataset_path=DATASET_REL)
    save_demos(demos_path, demos)
    full.save(out / "full.json")
    full.success_only("success").save(out / "success.json")
    paths = [demos_path, out / "full.json", out / "success.json", store.echo_config(out)]
    store.record(paths, "data")
    return paths


def _save_manifest(man, path):
    dataclasses.replace(man, dataset=DATASET_REL).save(path)


def _load_data(store):
    demos_path = store.require(DATASET_REL, "gen-data")
    full = DatasetManifest.load(store.require("data/full.json", "gen-data"))
    full.dataset = str(demos_path)
    return load_demos(demos_path), full


def _train_task(task):
    manifest_json, policy_dict, seed, out_dir, demos_path = task
    man = DatasetManifest.from_json(manifest_json)
    demos = load_demos(demos_path)
    rec = train(man, PolicyConfig.from_dict({**policy_dict, "seed": seed}), demos, out_dir)
    return rec.checkpoint


def _train_group(store, group_dir, manifest, policy_config, demos_path):
    """Train every configured seed into ``group_dir``; nothing is kept if any seed fails."""
    cfg = store.config
    final = Path(group_dir)
    partial = final.with_name(final.name + ".partial")
    if partial.exists():
        shutil.rmtree(partial)
    tasks = [(manifest.to_json(), policy_config.to_dict(), s, str(partial / f"seed{s}"), str(demos_path))
             for s in cfg["run"]["seeds"]]
    try:
        if cfg["run"]["jobs"] > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(min(cfg["run"]["jobs"], len(tasks))) as pool:
                list(pool.map(_train_task, tasks))
        else:
            for t in tasks:
                _train_task(t)
        _save_manifest(manifest, partial / "manifest.json")
        store.echo_config(partial)
    except BaseException:
        shutil.rmtree(partial, ignore_errors=True)
        raise
    if final.exists():
        shutil.rmtree(final)
    partial.rename(final)
    rel = final.resolve().relative_to(store.root.resolve()).as_posix()
    store.forget(rel + "/")
    store.record(sorted(p for p in final.rglob("*") if p.is_file()), "train")
    return final


def _condition_manifest(name, full):
    return full.success_only(name) if CONDITIONS[name][3] else DatasetManifest(
        name, full.dataset, list(full.success_ids), list(full.failure_ids), full.strategy, dict(full.provenance))


def _condition_policy(cfg, name):
    if CONDITIONS[name][2]:
        return cfg.policy_config()
    return cfg.policy_config(use_pb=False, lambda_kl=0.0)


def train_conditions(store, conditions=None):
    """Process-1 style training of the configured baseline/proposed conditions."""
    cfg = store.config
    demos, full = _load_data(store)
    if not full.failure_ids and any(not CONDITIONS[c][3] for c in cfg["run"]["conditions"]):
        log.warning("dataset has no failures; full-dataset conditions equal success-only ones")
    out = []
    for name in conditions or cfg["run"]["conditions"]:
        man = _condition_manifest(name, full)
        out.append(_train_group(store, store.path("train", name), man, _condition_policy(cfg, name),
                                full.dataset))
    return out


def _load_group(store, group_dir, stage):
    seeds = store.config["run"]["seeds"]
    cks = {}
    for s in seeds:
        p = Path(group_dir) / f"seed{s}" / "checkpoint.npz"
        if not p.exists():
            raise IntegrityError(f"missing {p}: run {stage} first")
        cks[s] = load_checkpoint(p)
    return cks


def score_failures(store):
    demos, full = _load_data(store)
    if not full.failure_ids:
        raise ConfigError("dataset has no failures to score")
    cks = _load_group(store, store.path("train", PROCESS_ONE), "train")
    scores = score_all([demos[i] for i in full.failure_ids], cks)
    out = store.path("scores")
    out.mkdir(parents=True, exist_ok=True)
    p = write_scores_csv(out / "scores.csv", scores)
    means = out / "mode_means.json"
    means.write_text(json.dumps(mode_means(scores), indent=1, sort_keys=True) + "\n")
    paths = [p, means, store.echo_config(out)]
    store.record(paths, "scores")
    return scores


def _plan_specs(cfg, strategy=None):
    sel = cfg["selection"]
    specs = []
    for s in (strategy,) if strategy else sel["strategies"]:
        if s == "random":
            specs += [("random", i) for i in range(sel["random_subsets"])]
        else:
            specs.append((s, 0))
    return specs


def select(store, strategy=None):
    cfg = store.config
    sel = cfg["selection"]
    scores_path = store.require("scores/scores.csv", "score-failures")
    demos, full = _load_data(store)
    scores = read_scores_csv(scores_path)
    digest = scores_digest(scores_path)
    base = full.success_only("success")
    written = []
    for out in (store.path("plans"), store.path("manifests")):
        out.mkdir(parents=True, exist_ok=True)
    for strat, i in _plan_specs(cfg, strategy):
        seed = sel["random_seed"] if strat == "random" else None
        plan = build_plan(scores, strat, sel["subset_size"], seed, i, digest)
        man = reconstruct_manifest(base, plan, demos)
        pp, mp = store.path("plans", f"{man.name}.json"), store.path("manifests", f"{man.name}.json")
        plan.save(pp)
        _save_manifest(man, mp)
        written.append(man)
        store.record([pp, mp], "selection")
    store.record([store.echo_config(store.path("plans")), store.echo_config(store.path("manifests"))], "selection")
    return written


def _manifest_names(cfg, strategy=None):
    n = cfg["selection"]["subset_size"]
    return [f"{s}-{n}" if s != "random" else f"random{i}-{n}" for s, i in _plan_specs(cfg, strategy)]


def retrain(store, strategy=None):
    cfg = store.config
    _, full = _load_data(store)
    out = []
    for name in _manifest_names(cfg, strategy):
        man = DatasetManifest.load(store.require(f"manifests/{name}.json", "select"))
        man.dataset = full.dataset
        out.append(_train_group(store, store.path("retrain", name), man, cfg.policy_config(), full.dataset))
    return out


def _report_to_dict(r):
    d = dataclasses.asdict(r)
    for x in d["rollouts"]:
        if isinstance(x["similarity"], float) and math.isnan(x["similarity"]):
            x["similarity"] = None
    return d


def _report_from_dict(d):
    return EvalReport(**d)


def _eval_groups(store, strategy=None):
    cfg = store.config
    groups = []
    for c in cfg["run"]["conditions"]:
        model, ds, _, _ = CONDITIONS[c]
        groups.append((c, store.path("train", c), f"{model} / {ds}", model, ds, "train"))
    if cfg["selection"]["subset_size"] > 0 and store.path("scores", "scores.csv").exists():
        for name in _manifest_names(cfg, strategy):
            ds = f"D_S+D_F^{name}"
            groups.append((name, store.path("retrain", name), f"Proposed / {ds}", "Proposed", ds, "retrain"))
    return groups


def evaluate_all(store, strategy=None):
    cfg = store.config
    ev = cfg["eval"]
    demos, _ = _load_data(store)
    out = store.path("eval")
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for name, group, label, model, ds, stage in _eval_groups(store, strategy):
        cks = _load_group(store, group, stage)
        rep = evaluate(cks, ev["n_rollouts"], ev["env_seed_base"], demos, label, ev["max_steps"], model, ds)
        p = out / f"{name}.json"
        p.write_text(json.dumps(_report_to_dict(rep), indent=1, sort_keys=True) + "\n")
        store.record([p], "eval")
        reports.append(rep)
    store.record([store.echo_config(out)], "eval")
    return reports


def _random_aggregate(reports):
    rand = [r for r in reports if r.dataset.startswith("D_S+D_F^random")]
    if len(rand) < 2:
        return None
    seeds = rand[0].seeds
    rates = [float(np.mean([r.rates[j] for r in rand])) for j in range(len(seeds))]
    return EvalReport("Proposed / D_S+D_F^random (mean of subsets)", seeds, rand[0].n_rollouts, rates,
                      model="Proposed", dataset="D_S+D_F^random")


def _pca_plots(store, demos, scores, eval_reports):
    plots = []
    group = store.path("train", PROCESS_ONE, f"seed{store.config['run']['seeds'][0]}", "checkpoint.npz")
    if group.exists():
        table = load_checkpoint(group).pb_table
        if table is not None and len(table) >= 2:
            vecs = [(i, table.array(i).ravel()) for i in table.demo_ids]
            res = pca_project(vecs, 2)
            kbar = {s.demo_id: s.mean for s in scores}
            plots.append(PCAPlot("pb", res, dict(zip(table.demo_ids, table.labels)), kbar))
    success = [d for d in demos.values() if d.label == SUCCESS]
    prop = next((r for r in eval_reports if r.dataset == "D_S+D_F" and r.model == "Proposed"), None)
    if len(success) >= 2:
        vecs = [(d.demo_id, embed(d.observations[0])) for d in sorted(success, key=lambda d: d.demo_id)]
        groups = {d.demo_id: "success" for d in success}
        links = []
        if prop is not None:
            for x in prop.rollouts[:5]:
                if x["seed"] != prop.seeds[0] or x["retrieved"] is None:
                    continue
                q = f"query{x['index']}"
                vecs.append((q, embed(WorldState.from_dict(x["initial_state"]).observation())))
                groups[q] = "query"
                links.append((q, x["retrieved"]))
        if len(vecs) >= 2:
            plots.append(PCAPlot("embedding", pca_project(vecs, 2), groups, links=links))
    return plots


def report(store, strategy=None):
    cfg = store.config
    demos, _ = _load_data(store)
    reports = []
    for name, *_ in _eval_groups(store, strategy):
        p = store.require(f"eval/{name}.json", "eval")
        reports.append(_report_from_dict(json.loads(p.read_text())))
    agg = _random_aggregate(reports)
    if agg is not None:
        reports.append(agg)
    sp = store.path("scores", "scores.csv")
    scores = read_scores_csv(sp) if sp.exists() else []
    out = store.path("report")
    if out.exists():
        shutil.rmtree(out)
    store.forget("report/")
    paths = emit_report(reports, scores, _pca_plots(store, demos, scores, reports), out)
    if scores:
        mm = out / "mode_means.csv"
        rows = ["failure_mode,mean_kbar"] + [f"{k},{v!r}" for k, v in sorted(mode_means(scores).items())]
        mm.write_text("\n".join(rows) + "\n")
        paths.append(mm)
    paths.append(store.echo_config(out))
    store.record(paths, "report")
    return paths


def run_all(store, strategy=None):
    gen_data(store)
    train_conditions(store)
    n_fail = len(DatasetManifest.load(store.path("data", "full.json")).failure_ids)
    if n_fail and PROCESS_ONE in store.config["run"]["conditions"]:
        score_failures(store)
        if store.config["selection"]["subset_size"] > 0:
            select(store, strategy)
            retrain(store, strategy)
        else:
            log.warning("subset_size 0: skipping selection and retraining")
    elif store.config["selection"]["subset_size"] > 0:
        raise ConfigError(f"selection needs failures and the {PROCESS_ONE} condition")
    evaluate_all(store, strategy)
    return report(store, strategy)

