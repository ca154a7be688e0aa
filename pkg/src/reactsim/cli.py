"""Command line entry point.

Exit codes: 0 ok, 1 runtime failure, 2 bad input format, 3 failed validation.
Every command that writes results also writes a manifest with the effective
configuration, seeds and sha256 hashes of its inputs and outputs, and nothing
time-dependent, so a re-run with the same arguments reproduces it byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path


from . import __version__
from .conflict import write_conflict_trace
from .control import write_audit
from .engine import EGO_POLICIES, PREDICTORS, EgoMissing, Models, SimConfig, read_trace, run_segment, write_trace
from .metrics import HORIZONS, evaluate, scenario_breakdown
from .nn import load_checkpoint, save_checkpoint, write_curve
from .scenario import (
    FrameGap,
    ImplausibleTrack,
    MissingColumn,
    NonMonotonicFrames,
    ScenarioError,
    TooShort,
    UnitRange,
    parse_ngsim_csv,
    read_canonical_log,
    read_map,
    segment_log,
    write_canonical_log,
    write_map,
)

log = logging.getLogger("reactsim")

EXIT_OK, EXIT_RUNTIME, EXIT_FORMAT, EXIT_VALIDATION = 0, 1, 2, 3

MAP_SUFFIX = ".map.json"
SIM_KEYS = {
    "roi": ("roi_radius", float),
    "horizon": ("horizon", int),
    "history": ("history", int),
    "max_iterations": ("max_iterations", int),
    "seed": ("seed", int),
    "ego_policy": ("ego_policy", str),
    "predictor": ("predictor", str),
    "inflation": ("inflation", float),
    "blend_ticks": ("blend_ticks", int),
    "max_takeover_ticks": ("max_takeover_ticks", int),
}


class ConfigError(ValueError):
    pass


class InputFormatError(ValueError):
    pass


# --- helpers ------------------------------------------------------------------------------------


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def parse_value(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    return t


def read_config(path: Path | None) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    if path is None:
        return {}
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputFormatError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def write_config(cfg: dict, path: Path) -> None:
    path.write_text("".join(f"{k} = {v}\n" for k, v in sorted(cfg.items())))


def map_sidecar(log_path: Path) -> Path:
    return log_path.with_name(log_path.name + MAP_SUFFIX)


def load_log(path: Path):
    side = map_sidecar(path)
    m = None
    if side.exists():
        with side.open("rb") as fh:
            m = read_map(fh)
    with Path(path).open("rb") as fh:
        return read_canonical_log(fh, m), (side if m is not None else None)


def save_log(log_, path: Path) -> list[Path]:
    with path.open("wb") as fh:
        write_canonical_log(log_, fh)
    written = [path]
    if log_.map is not None:
        side = map_sidecar(path)
        with side.open("wb") as fh:
            write_map(log_.map, fh)
        written.append(side)
    return written


def invocation(args) -> dict:
    """The parsed arguments minus the output location; enough to re-run the command."""
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out", "verbose")}


def manifest(command: str, config: dict, seeds: dict, inputs: list[Path], artifacts: dict[str, Path],
             extra: dict | None = None, args=None) -> dict:
    doc = {
        "tool": "reactsim",
        "version": __version__,
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "artifacts": {name: sha256_file(p) for name, p in sorted(artifacts.items())},
    }
    if args is not None:
        doc["args"] = invocation(args)
    if extra:
        doc.update(extra)
    return doc


def dump_json(doc, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --- import ------------------------------------------------------------------------------------


def cmd_import(args) -> int:
    m = None
    if args.map:
        with open(args.map, "rb") as fh:
            m = read_map(fh)
    with open(args.csv, newline="") as fh:
        log_ = parse_ngsim_csv(fh, units=args.units, map=m)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_log(log_, out)
    n = len(log_.tracks)
    print(f"{n} track{'s' if n != 1 else ''}, {log_.duration_steps} steps")
    return EXIT_OK


# --- synthetic scenarios -------------------------------------------------------------------------


def _scenario_config(sc) -> dict:
    cfg = {"ego": sc.ego, "ego_policy": sc.ego_policy}
    cfg.update({f"ego_param.{k}": v for k, v in sc.ego_params.items()})
    return cfg


def cmd_synth(args) -> int:
    from . import synthetic

    kind = args.kind
    if kind == "cut-in":
        scenarios = [synthetic.cut_in_scenario(seed=args.seed)]
    elif kind == "left-turn":
        scenarios = [synthetic.left_turn_scenario(seed=args.seed)]
    elif kind == "corpus":
        scenarios = synthetic.conflict_corpus(args.count, seed=args.seed)
    else:
        scenarios = synthetic.free_flow_segments(args.count, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, sc in enumerate(scenarios):
        stem = f"{k:03d}-{sc.name}" if len(scenarios) > 1 else sc.name
        save_log(sc.segment.log, out / f"{stem}.log")
        write_config(_scenario_config(sc), out / f"{stem}.cfg")
    print(f"{len(scenarios)} scenario{'s' if len(scenarios) != 1 else ''} written to {out}")
    return EXIT_OK


# --- simulate --------------------------------------------------------------------------------------


def sim_settings(args) -> tuple[dict, dict]:
    """Merge config file and flags (flags win) into SimConfig kwargs and ego params."""
    raw = read_config(args.config)
    flags = {
        "roi": args.roi,
        "ego": args.ego,
        "ego_policy": args.ego_policy,
        "predictor": args.predictor,
        "seed": args.seed,
    }
    raw.update({k: v for k, v in flags.items() if v is not None})
    if args.disable_takeover:
        raw["disable_takeover"] = True
    kw, ego_params = {}, {}
    for key, val in raw.items():
        if key.startswith("ego_param."):
            ego_params[key.split(".", 1)[1]] = val
        elif key == "ego":
            kw["ego"] = None if str(val) == "random" else int(val)
        elif key == "disable_takeover":
            kw["takeover"] = not bool(val)
        elif key in SIM_KEYS:
            name, cast = SIM_KEYS[key]
            kw[name] = cast(val)
        elif key in ("predictor_checkpoint", "policy_checkpoint"):
            continue
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    return kw, ego_params


def _models(args, raw: dict, inputs: list) -> Models:
    models = Models()
    pred = args.predictor_checkpoint or raw.get("predictor_checkpoint")
    if pred:
        with open(pred, "rb") as fh:
            models.predictor = load_checkpoint(fh)
        inputs.append(Path(pred))
    pol = args.policy_checkpoint or raw.get("policy_checkpoint")
    if pol:
        from .policy import learned_controller

        with open(pol, "rb") as fh:
            models.controller = learned_controller(load_checkpoint(fh))
        inputs.append(Path(pol))
    return models


def cmd_simulate(args) -> int:
    kw, ego_params = sim_settings(args)
    cfg = SimConfig(**kw)
    log_path = Path(args.log)
    log_, side = load_log(log_path)
    inputs = [log_path] + ([side] if side else []) + ([Path(args.config)] if args.config else [])
    models = _models(args, read_config(args.config), inputs)
    segments = segment_log(log_)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts, seg_docs = {}, []
    for k, seg in enumerate(segments):
        trace = run_segment(seg, cfg, models, ego_params)
        stem = f"seg{k:03d}"
        for suffix, writer, payload in (
            ("trace.csv", write_trace, trace),
            ("audit.csv", write_audit, trace.audit),
            ("conflicts.csv", write_conflict_trace, trace.conflicts),
        ):
            p = out / f"{stem}.{suffix}"
            with p.open("wb") as fh:
                writer(payload, fh)
            artifacts[p.name] = p
        seg_docs.append({"index": k, "offset": seg.offset, "ego": trace.ego, "trace": f"{stem}.trace.csv",
                         "takeovers": trace.takeover_count()})
        log.info("segment %d: ego %d, %d takeovers", k, trace.ego, trace.takeover_count())
    doc = manifest(
        "simulate", {**cfg.to_dict(), "ego_params": ego_params}, {"run": cfg.seed}, inputs, artifacts,
        {"log": str(log_path), "segments": seg_docs}, args,
    )
    dump_json(doc, out / "manifest.json")
    print(f"{len(segments)} segment{'s' if len(segments) != 1 else ''} simulated into {out}")
    return EXIT_OK


# --- evaluate ----------------------------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    traces, names, inputs = [], [], []
    for d in map(Path, args.traces):
        mpath = d / "manifest.json"
        if not mpath.exists():
            raise InputFormatError(f"{d} has no manifest.json")
        man = json.loads(mpath.read_text())
        if "segments" not in man or ("log" not in man and not args.log):
            raise InputFormatError(f"{mpath} is not a simulate manifest")
        log_path = Path(args.log) if args.log else Path(man["log"])
        log_, side = load_log(log_path)
        segments = segment_log(log_)
        inputs += [mpath, log_path] + ([side] if side else [])
        for s in man["segments"]:
            tp = d / s["trace"]
            with tp.open("rb") as fh:
                try:
                    traces.append(read_trace(fh, segments[s["index"]]))
                except (ValueError, IndexError, KeyError) as exc:
                    raise InputFormatError(f"{tp}: {exc}") from None
            inputs.append(tp)
            names.append(f"{d.name}/{s['trace']}")
    if not traces:
        raise InputFormatError("no traces to evaluate")
    horizons = tuple(h for h in HORIZONS if h * 10 <= min(t.states.shape[0] for t in traces))
    report = evaluate(traces, horizons=horizons)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    doc["scenarios_detail"] = scenario_breakdown(traces, names)
    doc["manifest"] = manifest("evaluate", {"horizons": list(horizons)}, {}, inputs, {}, args=args)
    dump_json(doc, out)
    ade = ", ".join(f"{h}s {v:.3f}" for h, v in report.ade_at.items())
    print(f"ADE {ade} | collision {report.collision_rate:.4f} | reactivity {report.reactivity_rate:.4f} | "
          f"relevant {report.relevant_ratio:.4f} | progress {report.progress:.2f} m")
    return EXIT_OK


# --- train ---------------------------------------------------------------------------------------------


def cmd_train(args) -> int:
    raw = read_config(args.config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else int(raw.pop("seed", 0))
    raw.pop("seed", None)
    inputs = [Path(args.config)] if args.config else []
    if args.kind == "predictor":
        from .predictor import PredictorConfig, train_predictor

        if not args.data:
            raise ConfigError("train predictor needs --data")
        if args.epochs is not None:
            raw["epochs"] = args.epochs
        unknown = set(raw) - set(PredictorConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown predictor keys {sorted(unknown)}")
        cfg = PredictorConfig(**raw)
        segments = []
        for p in map(Path, args.data):
            log_, side = load_log(p)
            segments += segment_log(log_)
            inputs += [p] + ([side] if side else [])
        params = train_predictor(segments, cfg, seed=seed)
        columns, config = ("epoch", "loss"), asdict(cfg)
    else:
        from .policy import EnvConfig, PPOConfig, RewardConfig, generate_expert_data, train_policy

        updates = args.updates if args.updates is not None else int(raw.pop("updates", 200))
        raw.pop("updates", None)
        episodes = int(raw.pop("expert_episodes", 32))
        reward = RewardConfig(**{k[7:]: float(v) for k, v in raw.items() if k.startswith("reward.")})
        env = EnvConfig(**{k[4:]: v for k, v in raw.items() if k.startswith("env.")})
        rest = {k: v for k, v in raw.items() if not k.startswith(("reward.", "env."))}
        unknown = set(rest) - set(PPOConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown policy keys {sorted(unknown)}")
        cfg = PPOConfig(**rest, reward=reward, env=env)
        expert = generate_expert_data(episodes, seed + 10_000, env)
        params = train_policy(updates, seed, cfg, expert, eval_every=max(1, updates // 20))
        columns, config = ("update", "return", "disc_accuracy"), {**cfg.to_dict(), "updates": updates}
    with out.open("wb") as fh:
        save_checkpoint(params, fh)
    curve = out.with_name(out.name + ".curve.csv")
    with curve.open("wb") as fh:
        write_curve(params.curve, columns, fh)
    dump_json(manifest(f"train {args.kind}", config, {"train": seed}, inputs, {out.name: out, curve.name: curve}, args=args),
              out.with_name(out.name + ".manifest.json"))
    last = params.curve[-1] if params.curve else {}
    print(f"{args.kind} checkpoint written to {out}" + (f" ({', '.join(f'{k} {v:.4g}' for k, v in last.items())})" if last else ""))
    return EXIT_OK


# --- rerun ----------------------------------------------------------------------------------------------


def cmd_rerun(args) -> int:
    """Repeat a recorded command into a new output location."""
    doc = json.loads(Path(args.manifest).read_text())
    doc = doc.get("manifest", doc)  # evaluate reports embed theirs
    if "args" not in doc or "command" not in doc:
        raise InputFormatError(f"{args.manifest} is not a reactsim manifest")
    recorded = argparse.Namespace(**doc["args"], out=args.out, verbose=args.verbose)
    handlers = {"simulate": cmd_simulate, "evaluate": cmd_evaluate, "train predictor": cmd_train,
                "train policy": cmd_train}
    if doc["command"] not in handlers:
        raise InputFormatError(f"cannot rerun {doc['command']!r}")
    for name, digest in doc["inputs"].items():
        if sha256_file(Path(name)) != digest:
            log.warning("input %s changed since the recorded run", name)
    return handlers[doc["command"]](recorded)


# --- wiring --------------------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="reactsim", description="Log-replay traffic simulation with reactive takeover.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("import", help="convert an NGSIM-style CSV into a canonical log")
    p.add_argument("--csv", required=True)
    p.add_argument("--map", help="map document (JSON) to attach")
    p.add_argument("--out", required=True)
    p.add_argument("--units", choices=("feet", "meters"), default="feet")
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("synth", help="write synthetic scenarios as canonical logs")
    p.add_argument("kind", choices=("cut-in", "left-turn", "corpus", "free-flow"))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=20)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("simulate", help="run the closed-loop engine over every segment of a log")
    p.add_argument("--log", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--roi", type=float)
    p.add_argument("--ego", help="agent id or 'random'")
    p.add_argument("--ego-policy", choices=EGO_POLICIES)
    p.add_argument("--predictor", choices=PREDICTORS)
    p.add_argument("--predictor-checkpoint")
    p.add_argument("--policy-checkpoint")
    p.add_argument("--seed", type=int)
    p.add_argument("--disable-takeover", action="store_true", help="pure log replay baseline")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the predictor or the takeover policy")
    p.add_argument("kind", choices=("predictor", "policy"))
    p.add_argument("--data", nargs="*", default=[])
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--updates", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics over simulated trace directories")
    p.add_argument("--traces", nargs="+", required=True)
    p.add_argument("--log", help="override the log recorded in each manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rerun", help="repeat the command recorded in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerun)
    return ap


FORMAT_ERRORS = (MissingColumn, NonMonotonicFrames, FrameGap, InputFormatError, json.JSONDecodeError, UnicodeDecodeError)
VALIDATION_ERRORS = (UnitRange, ImplausibleTrack, TooShort, EgoMissing, ConfigError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FORMAT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except UnitRange as e:
        print(f"error: {e} (are the inputs in feet? try --units)", file=sys.stderr)
        return EXIT_VALIDATION
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ScenarioError, FileNotFoundError, IsADirectoryError) as e:
        # unparseable values or missing files
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except (ValueError, TypeError) as e:
        # remaining bad values in configs or files
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001 - last-resort exit code
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
