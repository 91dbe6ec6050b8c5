"""Command-line entry point.

Exit codes: 0 success, 1 domain error (bad inputs, generation failure),
2 usage error (bad arguments, unreadable or invalid config).  Every run
writes a manifest JSON next to its outputs; manifests carry a wall-time
field and are the only output excluded from byte-for-byte reproducibility.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, replace

from . import configio
from .errors import CfmError
from .flownet import VelocityModel
from .harness import (KC_GRID, LAM_GRID, MODULE_GRID, STEPS_GRID,
                      ExperimentSpec, ablation_suite, evaluate, train_model)
from .jsonio import dumps_canonical
from .sampler import (anchor_condition, load_flow_path, sample,
                      sample_multimodal, save_flow_path)
from .scenario import dataset_build, generate_scene, load_dataset
from .vocab import fps_build, load_vocab, save_vocab, \
    select_constraint_anchor

COMMANDS = ("gen-data", "build-vocab", "train", "sample", "eval", "ablate",
            "export-path")


class UsageError(Exception):
    """Bad invocation or config: reported with exit code 2."""


@dataclass(eq=False)
class RunConfig:
    command: str
    config_path: str | None
    out_dir: str
    seed_override: int | None
    quiet: bool
    export_input: str | None = None
    export_format: str = "csv"
    modules: str | None = None


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfmplan",
        description="Constrained flow-matching trajectory planner tools")
    sub = parser.add_subparsers(dest="command", metavar="|".join(COMMANDS))

    def common(p, config_required=True):
        p.add_argument("--config", default=None, required=config_required,
                       help="TOML run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="master seed override")
        p.add_argument("-q", "--quiet", action="store_true")

    for name in ("gen-data", "build-vocab", "train", "sample", "eval"):
        common(sub.add_parser(name))
    ablate = sub.add_parser("ablate")
    common(ablate)
    ablate.add_argument("--modules", default=None,
                        help="comma-separated module grid override")
    export = sub.add_parser("export-path")
    export.add_argument("input", help="flow path JSONL file")
    export.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    export.add_argument("--out", required=True)
    export.add_argument("-q", "--quiet", action="store_true")
    return parser


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: str, command: str, cfg_echo: dict, seed: int,
                    inputs: list[str], outputs: list[str],
                    t0: float) -> str:
    manifest = {
        "command": command,
        "config": cfg_echo,
        "seed": int(seed),
        "inputs": {p: _sha256_file(p) for p in sorted(set(inputs))},
        "outputs": sorted(os.path.basename(p) for p in outputs),
        "wall_time_s": time.time() - t0,
    }
    path = os.path.join(out_dir, "manifest-%s.json" % command)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_canonical(manifest) + "\n")
    return path


def _require(cfg: dict, section: str, key: str, command: str):
    try:
        return cfg[section][key]
    except KeyError:
        raise UsageError("%s requires [%s] %s in the config"
                         % (command, section, key)) from None


def _input_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise CfmError("%s not found: %s" % (what, path))
    return path


def _say(rc: RunConfig, text: str) -> None:
    if not rc.quiet:
        print(text)


# ---------------------------------------------------------------------------
# command bodies; each returns (inputs, outputs) for the manifest


def _cmd_gen_data(rc: RunConfig, cfg: dict, seed: int):
    counts = cfg.get("data")
    if not counts:
        raise UsageError("gen-data requires a [data] section with "
                         "per-kind record counts")
    out = os.path.join(rc.out_dir, "dataset.jsonl")
    n = dataset_build(counts, seed, out)
    _say(rc, "wrote %s (%d records)" % (out, n))
    return [], [out]


def _cmd_build_vocab(rc: RunConfig, cfg: dict, seed: int):
    size = _require(cfg, "vocab", "size", "build-vocab")
    ds = _input_file(_require(cfg, "paths", "dataset", "build-vocab"),
                     "dataset")
    _, records = load_dataset(ds)
    vocab = fps_build([r.trajectory for r in records], size)
    out = os.path.join(rc.out_dir, "vocab.blk")
    save_vocab(out, vocab)
    _say(rc, "wrote %s (%d anchors from %d plans)"
         % (out, len(vocab), len(records)))
    return [ds], [out]


def _cmd_train(rc: RunConfig, cfg: dict, seed: int):
    ds = _input_file(_require(cfg, "paths", "dataset", "train"), "dataset")
    tc = configio.train_config(cfg, seed)
    inputs = [ds]
    vocab = None
    if tc.condition == "anchor":
        vp = _input_file(_require(cfg, "paths", "vocab", "train"),
                         "vocabulary")
        vocab = load_vocab(vp)
        inputs.append(vp)
    _, records = load_dataset(ds)
    model, log = train_model(records, tc, vocab)
    out = os.path.join(rc.out_dir, "model.blk")
    model.save(out)
    log_path = os.path.join(rc.out_dir, "train_log.json")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(dumps_canonical(log) + "\n")
    _say(rc, "wrote %s (final flow loss %.4g)" % (out, log["rf"][-1]))
    return inputs, [out, log_path]


def _load_model_vocab(cfg: dict, command: str):
    mp = _input_file(_require(cfg, "paths", "model", command), "checkpoint")
    vp = _input_file(_require(cfg, "paths", "vocab", command), "vocabulary")
    return VelocityModel.load(mp), load_vocab(vp), [mp, vp]


def _cmd_sample(rc: RunConfig, cfg: dict, seed: int):
    model, vocab, inputs = _load_model_vocab(cfg, "sample")
    section = cfg.get("sample", {})
    kind = section.get("kind", "straight")
    scene_seed = section.get("scene_seed", 0)
    scene = generate_scene(kind, scene_seed)
    scfg = configio.sampler_config(cfg, seed)
    outputs = []
    if section.get("per_anchor", False):
        results = sample_multimodal(model, scene, vocab, scfg)
        payload = {"kind": kind, "scene_seed": scene_seed,
                   "samples": [{"anchor": i,
                                "waypoints": traj.waypoints.tolist()}
                               for traj, i in results]}
        out = os.path.join(rc.out_dir, "samples.json")
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(payload, sort_keys=True) + "\n")
        outputs.append(out)
        _say(rc, "wrote %s (%d anchor-conditioned samples)"
             % (out, len(results)))
    else:
        anchor = select_constraint_anchor(vocab, scene)
        local = scfg
        if (scfg.cvf_enabled or scfg.cf_enabled) and not anchor.feasible:
            local = replace(scfg, cvf_enabled=False, cf_enabled=False)
        guided = local.cvf_enabled or local.cf_enabled
        cond = anchor_condition(model, anchor.trajectory)
        traj, fp = sample(model, scene, cond, local,
                          anchor=anchor if guided else None)
        path_out = os.path.join(rc.out_dir, "flowpath.jsonl")
        save_flow_path(fp, path_out)
        meta = {"kind": kind, "scene_seed": scene_seed,
                "anchor": anchor.index, "anchor_feasible": anchor.feasible,
                "cvf_skips": fp.cvf_skips,
                "waypoints": traj.waypoints.tolist()}
        meta_out = os.path.join(rc.out_dir, "sample.json")
        with open(meta_out, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(meta, sort_keys=True) + "\n")
        outputs += [path_out, meta_out]
        _say(rc, "wrote %s (%d states)" % (path_out, len(fp.states)))
    return inputs, outputs


def _cmd_eval(rc: RunConfig, cfg: dict, seed: int):
    model, vocab, inputs = _load_model_vocab(cfg, "eval")
    ds = _input_file(_require(cfg, "paths", "dataset", "eval"), "dataset")
    inputs.append(ds)
    _, records = load_dataset(ds)
    scfg = configio.sampler_config(cfg, seed)
    ev = cfg.get("eval", {})
    metrics = evaluate(model, records, vocab, scfg,
                       samples_per_scene=ev.get("samples_per_scene", 1),
                       ras_reward=ev.get("ras_reward"),
                       coverage_samples=ev.get("coverage_samples", 8),
                       threads=ev.get("threads"))
    out = os.path.join(rc.out_dir, "metrics.json")
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(dumps_canonical(metrics.as_dict()) + "\n")
    _say(rc, "wrote %s (composite %.4f)" % (out, metrics.composite))
    return inputs, [out]


def _cmd_ablate(rc: RunConfig, cfg: dict, seed: int):
    model, vocab, inputs = _load_model_vocab(cfg, "ablate")
    ds = _input_file(_require(cfg, "paths", "dataset", "ablate"), "dataset")
    inputs.append(ds)
    rfe_model = model
    rfe_path = cfg.get("paths", {}).get("rfe_model")
    if rfe_path is not None:
        rfe_model = VelocityModel.load(_input_file(rfe_path,
                                                   "rfe checkpoint"))
        inputs.append(rfe_path)
    _, records = load_dataset(ds)
    scfg = configio.sampler_config(cfg, seed)
    ev = cfg.get("eval", {})
    ab = cfg.get("ablate", {})
    if rc.modules is not None:
        module_grid = tuple(m for m in rc.modules.split(",") if m)
    else:
        module_grid = tuple(ab.get("modules", MODULE_GRID))
    spec = ExperimentSpec(name="ablate", data_counts=cfg.get("data", {}),
                          data_seed=seed,
                          train=configio.train_config(cfg, seed),
                          sampler=scfg, ras_reward=ev.get("ras_reward"),
                          seed=seed)
    rows = ablation_suite(
        model, rfe_model, records, vocab, spec, out_dir=rc.out_dir,
        module_grid=module_grid,
        lam_grid=tuple(ab.get("lam", LAM_GRID)),
        kc_grid=tuple(ab.get("k_c", KC_GRID)),
        steps_grid=tuple(ab.get("steps", STEPS_GRID)),
        samples_per_scene=ev.get("samples_per_scene", 1),
        coverage_samples=ev.get("coverage_samples", 0),
        threads=ev.get("threads"))
    h = spec.spec_hash()
    outputs = [os.path.join(rc.out_dir, "results-%s.%s" % (h, ext))
               for ext in ("csv", "json")]
    _say(rc, "wrote %s (%d rows)" % (outputs[0], len(rows)))
    return inputs, outputs


def export_path(input_path: str, fmt: str, out_dir: str) -> str:
    """Flatten a flow path file to one row per (step, waypoint)."""
    fp = load_flow_path(input_path)
    os.makedirs(out_dir, exist_ok=True)
    out = os.path.join(out_dir, "path.%s" % fmt)
    with open(out, "w", encoding="utf-8") as fh:
        if fmt == "csv":
            fh.write("step,t,waypoint,x,y\n")
            for k, (x, t) in enumerate(zip(fp.states, fp.times)):
                for w in range(x.shape[0]):
                    fh.write("%d,%.9g,%d,%.9g,%.9g\n"
                             % (k, t, w, x[w, 0], x[w, 1]))
        else:
            for k, (x, t) in enumerate(zip(fp.states, fp.times)):
                for w in range(x.shape[0]):
                    fh.write(json.dumps(
                        {"step": k, "t": t, "waypoint": w,
                         "x": x[w, 0], "y": x[w, 1]},
                        sort_keys=True) + "\n")
    return out


_BODIES = {
    "gen-data": _cmd_gen_data,
    "build-vocab": _cmd_build_vocab,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
}


def run(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("error: choose a command from: %s" % ", ".join(COMMANDS),
              file=sys.stderr)
        return 2
    rc = RunConfig(command=args.command,
                   config_path=getattr(args, "config", None),
                   out_dir=args.out,
                   seed_override=getattr(args, "seed", None),
                   quiet=args.quiet,
                   export_input=getattr(args, "input", None),
                   export_format=getattr(args, "format", "csv"),
                   modules=getattr(args, "modules", None))
    t0 = time.time()

    if rc.command == "export-path":
        try:
            out = export_path(rc.export_input, rc.export_format, rc.out_dir)
        except (CfmError, OSError) as exc:
            print("error: %s" % exc, file=sys.stderr)
            return 1
        if not rc.quiet:
            print("wrote %s" % out)
        return 0

    # config loading and validation is fatal before any side effect
    try:
        if rc.config_path is None:
            raise UsageError("%s requires --config" % rc.command)
        if not os.path.isfile(rc.config_path):
            raise UsageError("config file not found: %s" % rc.config_path)
        cfg = configio.load_config(rc.config_path)
    except (UsageError, CfmError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2

    seed = configio.master_seed(cfg, rc.seed_override)
    try:
        os.makedirs(rc.out_dir, exist_ok=True)
        inputs, outputs = _BODIES[rc.command](rc, cfg, seed)
        manifest = _write_manifest(rc.out_dir, rc.command, cfg, seed,
                                   inputs + [rc.config_path], outputs, t0)
        _say(rc, "manifest: %s" % manifest)
    except UsageError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except (CfmError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    return 0


def main() -> int:
    return run(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
