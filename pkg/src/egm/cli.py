"""``egm`` command-line entry point.

Exit codes: 0 success, 1 validation or usage error, 2 numerical failure.
Every command that writes outputs also writes ``run.json`` (command line,
seed, version) next to them; ``train`` adds a ``config.toml`` snapshot.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import tomli

from . import config as cfgmod
from .errors import ConfigError, EgmError, NumericalError
from .metrics import dump_rollout, evaluate
from .motion import (CurationRule, imbalanced_preset, load_dataset, read_manifest,
                     rule_filter, save_dataset, write_manifest)
from .sampler import BinRegistry, UniformClipSampler, sample_report


def version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _snapshot(out_dir, argv, seed=None, cfg=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"argv": list(argv), "seed": seed, "version": version()}
    (out_dir / "run.json").write_text(json.dumps(doc, indent=1), encoding="utf-8")
    if cfg is not None:
        cfgmod.write_config(cfg, out_dir / "config.toml")


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args, argv):
    if args.preset != "imbalanced":
        raise ConfigError(f"unknown preset {args.preset!r}")
    train, ev = imbalanced_preset(args.seed, args.dof)
    out = Path(args.out)
    m_train = save_dataset(train, out / "train")
    m_eval = save_dataset(ev, out / "eval")
    _snapshot(out, argv, args.seed)
    print(f"train: {len(train)} clips, {train.total_duration:.1f} s -> {m_train}")
    print(f"eval:  {len(ev)} clips, {ev.total_duration:.1f} s -> {m_eval}")


def _load_rules(path):
    try:
        doc = tomli.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read rules {path}: {exc}") from exc
    rules = []
    for i, table in enumerate(doc.get("rule", [])):
        table = dict(table)
        kind = table.pop("kind", None)
        if kind is None:
            raise ConfigError(f"rule {i}: missing 'kind'")
        rules.append(CurationRule(kind, table))
    extra = set(doc) - {"rule"}
    if extra:
        raise ConfigError(f"unknown key '{sorted(extra)[0]}' in rules file")
    return rules


def cmd_curate(args, argv):
    rules = _load_rules(args.rules)
    src = Path(args.input)
    dataset = load_dataset(src)
    kept, rejected = rule_filter(dataset, rules)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    paths = dict(zip(dataset.names(), read_manifest(src)))
    write_manifest(out, [paths[n] for n in kept.names()])
    with open(out.with_suffix(".rejections.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip", "rule", "detail"])
        for r in rejected:
            w.writerow([r.clip_name, r.rule.kind, r.detail])
    _snapshot(out.parent, argv)
    print(f"kept {len(kept)} of {len(dataset)} clips; {len(rejected)} rejected")


def _build_sampler(kind, dataset, cfg):
    cls = UniformClipSampler if kind == "uniform" else BinRegistry
    return cls(dataset, cfg.curriculum, cfg.weights)


def cmd_train(args, argv):
    from .trainer import (dagger_distill, load_teacher, new_student, new_teacher, run_stage,
                          save_student, save_teacher, write_log)

    cfg = cfgmod.parse_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(cfg.out_dir) / f"stage{args.stage}"
    dataset = load_dataset(cfg.manifest)
    sampler = _build_sampler(cfg.sampler, dataset, cfg)
    ppo = cfg.ppo1 if args.stage == 1 else cfg.ppo2
    teacher = new_teacher(cfg.env, cfg.policy, ppo, cfg.seed)
    if args.resume:
        load_teacher(args.resume, teacher)
        state = Path(args.resume).with_name("sampler.json")
        if state.is_file():
            sampler.load_dict(json.loads(state.read_text(encoding="utf-8")))
    elif args.stage in (2, 3):
        raise ConfigError(f"stage {args.stage} needs --resume with a trained checkpoint")
    _snapshot(out, argv, cfg.seed, cfg)
    meta = {"config": cfgmod.dump_config(cfg)}
    if args.stage == 3:
        student = new_student(teacher, cfg.env, cfg.distill, cfg.policy, cfg.seed)
        _, log = dagger_distill(teacher, student, sampler, dataset, cfg.env, cfg.distill,
                                cfg.ppo2.action_scale, cfg.seed, progress=_printer(args))
        save_student(out / "student.npz", student, {**meta, "action_scale": cfg.ppo2.action_scale})
        with open(out / "distill_log.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(log[0]))
            w.writeheader()
            w.writerows(log)
    else:
        res = run_stage(args.stage, teacher, sampler, dataset, cfg.env, ppo, cfg.seed,
                        progress=_printer(args))
        write_log(out / "train_log.csv", res.log)
        save_teacher(out / "teacher.npz", teacher, {**meta, "action_scale": ppo.action_scale})
    sampler.save(out / "sampler.json")
    print(f"wrote {out}")


def _printer(args):
    if not getattr(args, "verbose", False):
        return None
    return lambda row: print({k: (round(v, 4) if isinstance(v, float) else v) for k, v in row.items()})


def load_actor(path):
    """Rebuild the policy stored at ``path`` and wrap it for evaluation; returns ``(actor, cfg)``."""
    from .nn import load_archive
    from .trainer import (StudentActor, TeacherActor, load_student, load_teacher, new_student,
                          new_teacher)

    _, _, meta = load_archive(path)
    if "config" not in meta:
        raise ConfigError(f"{path} carries no run configuration")
    cfg = cfgmod.from_dict(tomli.loads(meta["config"]), check_paths=False, environ={})
    scale = float(meta["action_scale"])
    teacher = new_teacher(cfg.env, cfg.policy, cfg.ppo1, cfg.seed)
    if meta.get("kind") == "student":
        teacher.stage = 1
        student = new_student(teacher, cfg.env, cfg.distill, cfg.policy, cfg.seed)
        return StudentActor(load_student(path, student), scale), cfg
    load_teacher(path, teacher)
    return TeacherActor(teacher.policy, scale), cfg


def cmd_eval(args, argv):
    from .trainer import make_env

    actor, cfg = load_actor(args.policy)
    dataset = load_dataset(args.manifest)
    stage = args.stage
    factory = lambda n, s: make_env(cfg.env, stage, n, 10_000 + s)  # noqa: E731
    report = evaluate(actor, dataset, factory, tuple(range(args.seeds)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    if args.dump:
        dump_dir = Path(args.dump)
        dump_dir.mkdir(parents=True, exist_ok=True)
        for clip in dataset:
            dump_rollout(actor, factory(1, 0), clip, dump_dir / f"{clip.name}.csv")
    _snapshot(out.parent, argv, None, cfg)
    agg = report.aggregate()
    for m, (mean, std) in agg.items():
        print(f"{m:9s} {mean:.4f} +- {std:.4f}")
    for name, err in report.errors:
        print(f"clip {name}: {err}", file=sys.stderr)


def cmd_sample_report(args, argv):
    dataset = load_dataset(args.manifest)
    reg = BinRegistry.load(args.checkpoint, dataset)
    rows = sample_report(reg.stats(), dataset)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip", "duration_s", "count", "ratio"])
        for r in rows:
            w.writerow([r.clip_name, f"{r.duration_s:.6g}", r.count, f"{r.ratio:.9g}"])
    _snapshot(out.parent, argv)
    print(f"wrote {len(rows)} rows to {out}")


def cmd_gradcheck(args, argv):
    from .gradcheck import check_suite

    bank_kw = {}
    n_experts, k, hidden = (4, 6), 2, (64, 64)
    obs_dim = 60
    if args.policy:
        cfg = cfgmod.parse_config(args.policy, check_paths=False)
        n_experts, k, hidden = cfg.policy.n_experts, cfg.policy.k, cfg.policy.hidden
        bank_kw.update(d_feat=cfg.policy.d_feat, head_hidden=cfg.policy.head_hidden)
        n, nu = cfg.env.chain.n_joints, cfg.env.chain.n_upper
        from .trainer import obs_layout

        lay = obs_layout(cfg.env)
        obs_dim = lay["proprio"] + lay["goal"] + lay["privileged"]
        dims = (nu, n - nu)
    else:
        dims = (2, 3)
    bank_kw.update(hidden=hidden, head_gain=1.0)
    errs = check_suite(args.seed, obs_dim=obs_dim, action_dims=dims, n_experts=n_experts, k=k,
                       bank_kw=bank_kw, entries=args.entries)
    worst = max(errs.values())
    for name, e in errs.items():
        print(f"{name:15s} {e:.3e}")
    print(f"max relative error {worst:.3e}")
    if not worst < args.tol:
        raise NumericalError(f"gradient error {worst:.3e} exceeds {args.tol:g}", stage="gradcheck")


# --------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="egm", description="Motion tracking with adaptive bin sampling and expert policies")
    p.add_argument("--version", action="version", version=f"egm {version()}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a procedural toy dataset")
    g.add_argument("--preset", default="imbalanced")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dof", type=int, default=5)

    c = sub.add_parser("curate", help="filter a manifest with rule-based checks")
    c.add_argument("--rules", required=True)
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume")
    t.add_argument("--verbose", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--policy", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--seeds", type=int, default=3)
    e.add_argument("--out", required=True)
    e.add_argument("--stage", type=int, choices=(1, 2), default=1,
                   help="environment settings to evaluate under")
    e.add_argument("--dump", help="directory for per-clip trajectory CSVs")

    s = sub.add_parser("sample-report", help="per-clip sample ratios from a sampler checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)

    k = sub.add_parser("gradcheck", help="finite-difference check of policy and loss gradients")
    k.add_argument("--policy", help="run config whose policy sizes to check")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--entries", type=int, default=4, help="coordinates checked per parameter block")
    k.add_argument("--tol", type=float, default=1e-4)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "curate": cmd_curate, "train": cmd_train, "eval": cmd_eval,
            "sample-report": cmd_sample_report, "gradcheck": cmd_gradcheck}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        COMMANDS[args.command](args, argv)
    except NumericalError as exc:
        print(f"egm: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (EgmError, OSError) as exc:
        print(f"egm: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
