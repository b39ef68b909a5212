"""gridgame command line.

Every run writes ``manifest.json`` into ``--out-dir``. It holds the resolved
arguments, so ``gridgame replay <manifest>`` reruns the same work and checks
the output hashes. Options also read defaults from ``GRIDGAME_<OPTION>``
environment variables (``--out-dir`` -> ``GRIDGAME_OUT_DIR``).
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import math
import os
import platform
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .agents import DdpgAgent, DqnAgent, PolicyFormatError, load_policy, save_policy
from .dynamics import stressed_ieee14, trace_csv
from .game import Env
from .grid import CaseParseError, CaseValidationError, bus_kv, load_case, solve_power_flow
from .loads import AmbientProfile, NoiseSpec
from .protection import events_csv
from .stability import fvsi_report, report_csv
from . import training as tr

MANIFEST = "manifest.json"
ATTACKER_FILE = "attacker.json"
DEFENDER_FILE = "defender.json"
CONFIG_FILE = "config.txt"


class UsageError(Exception):
    pass


class DomainError(Exception):
    pass


@dataclass
class RunManifest:
    subcommand: str
    args: dict
    config_hash: str
    seeds: dict
    versions: dict
    started: str
    finished: str = ""
    status: str = "running"
    error: str = ""
    outputs: dict = field(default_factory=dict)  # file name -> sha256

    def write(self, out_dir: Path) -> Path:
        path = out_dir / MANIFEST
        tmp = path.with_name(MANIFEST + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)
        return path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _versions() -> dict:
    return {"gridgame": __version__, "python": platform.python_version(), "numpy": np.__version__}


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class Outputs:
    """Writes artifacts atomically and records their hashes."""

    def __init__(self, out_dir: Path):
        self.dir = out_dir
        self.hashes: dict[str, str] = {}

    def text(self, name: str, content: str) -> Path:
        path = self.dir / name
        tmp = path.with_name(name + ".tmp")
        tmp.write_text(content)
        os.replace(tmp, path)
        self.hashes[name] = _sha(content.encode())
        return path

    def file(self, name: str) -> None:
        self.hashes[name] = _sha((self.dir / name).read_bytes())


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _case(args):
    return load_case(args.case) if args.case else load_case()


def _config(args) -> tr.TrainConfig:
    cfg = tr.TrainConfig()
    path = args.config
    if path is None and getattr(args, "load_policy", None):
        cand = Path(args.load_policy) / CONFIG_FILE
        path = str(cand) if cand.exists() else None
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise DomainError(f"cannot read config {path}: {exc.strerror}") from None
        cfg = tr.parse_config_text(text, cfg)
    pairs = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    if pairs:
        cfg = tr.config_overrides(cfg, pairs)
    return cfg


def _policy(path: str, kind: type):
    agent = load_policy(path)
    if not isinstance(agent, kind):
        raise DomainError(f"{path} holds a {type(agent).__name__}, expected {kind.__name__}")
    return agent


def _policies(args):
    """(attacker, defender) from --load-policy DIR and the explicit per-agent paths."""
    att = dfn = None
    if args.load_policy:
        d = Path(args.load_policy)
        att, dfn = d / ATTACKER_FILE, d / DEFENDER_FILE
    if args.attacker:
        att = Path(args.attacker)
    if args.defender:
        dfn = Path(args.defender)
    attacker = _policy(str(att), DdpgAgent) if att else None
    defender = _policy(str(dfn), DqnAgent) if dfn else None
    return attacker, defender


def _cfg_hash(args: dict, cfg: tr.TrainConfig | None) -> str:
    payload = {"args": args, "config": tr.format_config(cfg) if cfg else None}
    return _sha(json.dumps(payload, sort_keys=True).encode())


def _fmt(v) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# subcommands; each returns (outputs written, seeds used, config or None)
# ---------------------------------------------------------------------------

def cmd_powerflow(args, out: Outputs):
    case = _case(args)
    sol = solve_power_flow(case, tol=args.tol)
    if not sol.converged:
        raise DomainError(f"power flow did not converge in {sol.iterations} iterations")
    kv = bus_kv(sol, case)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bus", "v_pu", "angle_deg", "v_kv", "p_gen_mw", "q_gen_mvar"])
    for i, bus in enumerate(case.buses):
        w.writerow([bus.id, _fmt(sol.v_mag[i]), _fmt(math.degrees(sol.v_ang[i])), _fmt(kv[i]),
                    _fmt(sol.p_gen[i]), _fmt(sol.q_gen[i])])
    text = buf.getvalue()
    out.text("powerflow.csv", text)
    sys.stdout.write(text)
    return {}, None


def cmd_fvsi(args, out: Outputs):
    case = _case(args)
    sol = solve_power_flow(case)
    if not sol.converged:
        raise DomainError("power flow did not converge")
    text = report_csv(fvsi_report(sol, case))
    out.text("fvsi.csv", text)
    sys.stdout.write(text)
    return {}, None


def _simulate_env(args, cfg: tr.TrainConfig) -> Env:
    overrides = {}
    if args.case:
        overrides["case"] = _case(args)
    if args.ambient:
        overrides["ambient"] = AmbientProfile.from_csv(args.ambient)
    sc = stressed_ieee14(noise=NoiseSpec(args.noise_var), dt_physics=cfg.physics_dt,
                         dt_control=cfg.control_dt, **overrides)
    ecfg = tr.env_config(cfg, args.r_th, attack=args.attack_mode != "none", attack_start=args.attack_start,
                         episode_steps=args.steps, randomize=args.randomize,
                         voltage_relays=args.aps != "off")
    return Env(sc, ecfg)


def cmd_simulate(args, out: Outputs):
    cfg = _config(args)
    env = _simulate_env(args, cfg)
    attacker = defender = None
    if args.attack_mode == "scripted":
        attacker = args.delta_t
    elif args.attack_mode == "policy":
        if not args.attack_policy:
            raise UsageError("--attack-mode policy needs --attack-policy PATH")
        attacker = _policy(args.attack_policy, DdpgAgent)
    if args.aps.startswith("policy:"):
        defender = _policy(args.aps[len("policy:"):], DqnAgent)
    elif args.aps not in ("off", "static"):
        raise UsageError("--aps must be off, static or policy:<path>")
    try:
        tr.check_dims(env, attacker, defender)
    except ValueError as exc:
        raise DomainError(str(exc)) from None
    dump = io.StringIO() if args.dump_transitions else None
    env.dump = dump
    try:
        ep = tr.run_episode(env, tr.as_attacker(attacker), tr.as_defender(defender), args.seed, keep_records=True)
    except ValueError as exc:
        raise DomainError(str(exc)) from None
    case = env.sim.case
    out.text("trace.csv", trace_csv(ep.records, case))
    events = [e for r in ep.records for e in r.events]
    out.text("events.csv", events_csv(events))
    if dump is not None:
        target = Path(args.dump_transitions)
        if target.parent == Path("."):
            out.text(target.name, dump.getvalue())
        else:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(dump.getvalue())
    status = "blackout" if ep.blackout else "survived"
    print(f"{status} steps={ep.steps} events={len(events)}"
          + (f" blackout_t={ep.blackout_time:.2f}" if ep.blackout else ""))
    return {"seed": args.seed}, cfg


def cmd_train(args, out: Outputs):
    cfg = _config(args)
    if args.seed is not None:
        cfg = tr.config_overrides(cfg, {"seed": str(args.seed)})
    if args.episodes is not None:
        cfg = tr.config_overrides(cfg, {"episodes": str(args.episodes)})
    if args.update_at_epoch_end:
        cfg = tr.config_overrides(cfg, {"literal_epoch_updates": "true"})

    def progress(row):
        if not args.quiet:
            print(f"episode {row['episode']} {row['phase']} blackout={row['blackout']} "
                  f"return_laa={row['return_laa']:.1f}", flush=True)

    res = tr.train(cfg, progress)
    # r_th is recorded so evaluation uses the same payoff scale
    cfg = tr.config_overrides(cfg, {"r_th": repr(res.r_th)})
    out.text(CONFIG_FILE, tr.format_config(cfg))
    out.text("metrics.csv", tr.metrics_csv(res.metrics))
    pol_dir = Path(args.save_policy) if args.save_policy else out.dir
    pol_dir.mkdir(parents=True, exist_ok=True)
    save_policy(res.attacker, pol_dir / ATTACKER_FILE)
    save_policy(res.defender, pol_dir / DEFENDER_FILE)
    if pol_dir == out.dir:
        out.file(ATTACKER_FILE)
        out.file(DEFENDER_FILE)
    print(f"trained {cfg.episodes} episodes in {res.seconds:.1f} s, r_th={res.r_th:.6g}")
    return {"seed": cfg.seed}, cfg


def _eval_rows(label: str, rep: tr.EvalReport) -> list:
    s = rep.summary()
    return [label, s["episodes"], _fmt(s["blackout_rate"]), _fmt(s["trip_rate"]), s["false_positives"],
            _fmt(s["mean_time_to_trip_s"])]


def cmd_evaluate(args, out: Outputs):
    cfg = _config(args)
    attacker, defender = _policies(args)
    if args.attack_mode == "scripted":
        attacker = args.delta_t
    if attacker is None:
        raise UsageError("evaluate needs an attacker: --load-policy, --attacker or --attack-mode scripted")
    r_th = cfg.r_th or 0.01
    kw = dict(attack_start=args.attack_start, seed=args.seed, noise_var=args.noise_var)
    try:
        reports = {"static_attack": tr.evaluate(attacker, None, args.episodes, cfg, r_th, **kw)}
        if defender is not None:
            reports["aps_attack"] = tr.evaluate(attacker, defender, args.episodes, cfg, r_th, **kw)
            reports["aps_clean"] = tr.evaluate(None, defender, args.episodes, cfg, r_th, attack=False, **kw)
    except ValueError as exc:
        raise DomainError(str(exc)) from None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["setting", "episodes", "blackout_rate", "trip_rate", "false_positives", "mean_time_to_trip_s"])
    for label, rep in reports.items():
        w.writerow(_eval_rows(label, rep))
        out.text(f"episodes_{label}.csv", tr.episodes_csv(rep))
    text = buf.getvalue()
    out.text("evaluate.csv", text)
    sys.stdout.write(text)
    return {"seed": args.seed, "eval_seed_offset": tr.EVAL_SEED_OFFSET}, cfg


def cmd_fpr_sweep(args, out: Outputs):
    cfg = _config(args)
    attacker, defender = _policies(args)
    if args.attack_mode == "scripted" or attacker is None:
        attacker = args.delta_t
    variances = tuple(float(v) for v in args.variances.split(",")) if args.variances else tr.FPR_VARIANCES
    try:
        table = tr.fpr_sweep(defender, attacker, variances, args.runs, args.attack_start, cfg,
                             cfg.r_th or 0.01, args.seed)
    except ValueError as exc:
        raise DomainError(str(exc)) from None
    text = table.to_csv()
    out.text("fpr.csv", text)
    num, den = table.fpr
    print(f"fpr {num}/{den} (defender={'static' if defender is None else 'policy'})")
    return {"seed": args.seed}, cfg


def cmd_replay(args, out: Outputs):
    """Handled in dispatch; listed for the parser only."""
    raise AssertionError


COMMANDS = {"powerflow": cmd_powerflow, "fvsi": cmd_fvsi, "simulate": cmd_simulate, "train": cmd_train,
            "evaluate": cmd_evaluate, "fpr-sweep": cmd_fpr_sweep}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gridgame", description="Smart-grid load-alteration attack and adaptive protection")
    p.add_argument("--version", action="version", version=f"gridgame {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, case=True):
        sp.add_argument("--out-dir", default="out", help="directory for outputs and manifest.json")
        if case:
            sp.add_argument("--case", help="case file (default: bundled IEEE 14-bus)")

    def config_opts(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    def policy_opts(sp):
        sp.add_argument("--load-policy", metavar="DIR", help="directory holding attacker.json/defender.json")
        sp.add_argument("--attacker", help="attacker policy file")
        sp.add_argument("--defender", help="defender policy file")

    sp = sub.add_parser("powerflow", help="solve the case and print bus voltages")
    common(sp)
    sp.add_argument("--tol", type=float, default=1e-10)

    sp = sub.add_parser("fvsi", help="per-line FVSI table of the solved case")
    common(sp)

    sp = sub.add_parser("simulate", help="one episode; writes trace.csv and events.csv")
    common(sp)
    config_opts(sp)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--steps", type=int, default=1200, help="control steps")
    sp.add_argument("--attack-start", type=float, default=120.0, help="s")
    sp.add_argument("--attack-mode", choices=("none", "scripted", "policy"), default="none")
    sp.add_argument("--delta-t", type=float, default=2.0, help="scripted falsification, degC")
    sp.add_argument("--attack-policy", help="attacker policy file for --attack-mode policy")
    sp.add_argument("--aps", default="static", help="off, static or policy:<path>")
    sp.add_argument("--noise-var", type=float, default=0.0, help="load noise variance, MW^2")
    sp.add_argument("--ambient", help="ambient profile CSV (time_s,ambient_c)")
    sp.add_argument("--r-th", type=float, default=0.01, help="payoff dV/dt scale, pu/s")
    sp.add_argument("--randomize", action="store_true", help="draw a perturbed initial state from --seed")
    sp.add_argument("--dump-transitions", metavar="PATH",
                    help="JSON-lines transitions; a bare name lands in --out-dir")

    sp = sub.add_parser("train", help="competitive training; writes policies and metrics.csv")
    common(sp, case=False)
    config_opts(sp)
    sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    sp.add_argument("--episodes", type=int, default=None, help="overrides the config episodes")
    sp.add_argument("--save-policy", metavar="DIR", help="policy directory (default: --out-dir)")
    sp.add_argument("--update-at-epoch-end", action="store_true",
                    help="batch all updates at episode end instead of every step")
    sp.add_argument("--quiet", action="store_true")

    for name, hlp in (("evaluate", "frozen policies on held-out episodes"),
                      ("fpr-sweep", "false-positive rate under growing load noise")):
        sp = sub.add_parser(name, help=hlp)
        common(sp, case=False)
        config_opts(sp)
        policy_opts(sp)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--attack-start", type=float, default=120.0)
        sp.add_argument("--attack-mode", choices=("policy", "scripted"), default="policy")
        sp.add_argument("--delta-t", type=float, default=2.0, help="scripted falsification, degC")
        if name == "evaluate":
            sp.add_argument("--episodes", type=int, default=10)
            sp.add_argument("--noise-var", type=float, default=0.0)
        else:
            sp.add_argument("--runs", type=int, default=10, help="runs per variance")
            sp.add_argument("--variances", help="comma separated, MW^2")

    sp = sub.add_parser("replay", help="rerun a manifest and compare output hashes")
    sp.add_argument("manifest")
    sp.add_argument("--out-dir", default=None, help="where to rerun (default: <manifest dir>/replay)")
    _env_defaults(p)
    return p


def _env_defaults(parser: argparse.ArgumentParser) -> None:
    """GRIDGAME_<DEST> environment variables replace option defaults."""
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sp in action.choices.values():
                _env_defaults(sp)
            continue
        if not action.option_strings or action.dest in ("help", "version"):
            continue
        raw = os.environ.get("GRIDGAME_" + action.dest.upper())
        if raw is None:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            action.default = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._AppendAction):
            action.default = [raw]
        else:
            try:
                action.default = action.type(raw) if action.type else raw
            except ValueError:
                raise UsageError(f"GRIDGAME_{action.dest.upper()}: bad value {raw!r}") from None


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def run_command(command: str, arg_dict: dict) -> RunManifest:
    args = argparse.Namespace(**arg_dict)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stored = {k: v for k, v in arg_dict.items() if k != "out_dir"}
    man = RunManifest(command, stored, "", {}, _versions(), _now())
    out = Outputs(out_dir)
    try:
        seeds, cfg = COMMANDS[command](args, out)
    except Exception as exc:
        man.status, man.error, man.finished = "error", f"{type(exc).__name__}: {exc}", _now()
        man.outputs = out.hashes
        man.write(out_dir)
        raise
    man.seeds = seeds
    man.config_hash = _cfg_hash(stored, cfg)
    man.outputs = out.hashes
    man.status, man.finished = "ok", _now()
    man.write(out_dir)
    return man


def replay(manifest_path: str, out_dir: str | None) -> int:
    path = Path(manifest_path)
    try:
        man = json.loads(path.read_text())
        command, stored = man["subcommand"], dict(man["args"])
    except (OSError, ValueError, KeyError) as exc:
        raise DomainError(f"unreadable manifest {manifest_path}: {exc}") from None
    if command not in COMMANDS:
        raise DomainError(f"manifest names unknown subcommand {command!r}")
    target = Path(out_dir) if out_dir else path.parent / "replay"
    if command == "train" and stored.get("save_policy"):
        stored["save_policy"] = None  # keep the replay from overwriting the original policies
    new = run_command(command, {**stored, "out_dir": str(target)})
    bad = [n for n, h in man.get("outputs", {}).items() if new.outputs.get(n) != h]
    if bad:
        print(f"mismatch: {','.join(sorted(bad))}")
        return 1
    print(f"identical: {len(new.outputs)} outputs")
    return 0


def dispatch(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        parser = build_parser()
        ns = parser.parse_args(argv)
        if ns.command == "replay":
            return replay(ns.manifest, ns.out_dir)
        d = vars(ns).copy()
        command = d.pop("command")
        run_command(command, d)
        return 0
    except UsageError as exc:
        print(f"gridgame: error: usage: {exc}", file=sys.stderr)
        return 2
    except (DomainError, CaseParseError, CaseValidationError, PolicyFormatError, ValueError, OSError,
            RuntimeError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"gridgame: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
