"""Command-line entry points: suites, single trials, the live service,
mission logs with exact replay, and debug artifact dumps."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .camera import CameraModel
from .events import canonical_json, config_hash, read_event_log, write_event_log
from .harness import SuiteArm, TrialSpec, format_report, run_suite, run_trial
from .orchestration import MissionRunner, Services, TaskConfig
from .scene import NoiseConfig, default_supply_room, load_scene, save_scene, scene_to_dict
from .world import World


def build_runner(seed: int, zero_noise: bool = False, camera=(256, 192),
                 scenario: str | None = None, config: TaskConfig | None = None) -> MissionRunner:
    if scenario:
        scene, noise, robot = load_scene(scenario)
        import dataclasses

        noise = dataclasses.replace(noise, seed=seed)
        base_start = tuple(robot.get("base_start", (3.0, 3.0, 0.0)))
    else:
        noise = NoiseConfig.zero(seed=seed) if zero_noise else NoiseConfig(seed=seed)
        scene, noise = default_supply_room(noise)
        base_start = (3.0, 3.0, 0.0)
    world = World(scene, noise, camera=CameraModel.scaled(*camera), base_start=base_start)
    return MissionRunner(world, Services(world, config or TaskConfig()))


def run_mission(runner: MissionRunner, submissions, max_bt_ticks: int = 30000):
    """Drive the BT loop, submitting jobs at their recorded ticks."""
    pending = sorted(submissions, key=lambda s: s["tick"])
    i = 0
    for _ in range(max_bt_ticks):
        while i < len(pending) and runner.world.tick >= pending[i]["tick"]:
            runner.queue.submit(pending[i]["kind"], pending[i]["sku"])
            i += 1
        runner.tick_once()
        if i >= len(pending) and not runner.queue.queued() and runner.queue.active() is None:
            break
    return runner


def mission_header(seed: int, submissions, zero_noise: bool, camera) -> dict:
    cfg = {"seed": seed, "zero_noise": zero_noise, "camera": list(camera),
           "scenario": "default-supply-room", "submissions": submissions}
    return {"kind": "mission", "config": cfg, "config_hash": config_hash(cfg), "seed": seed}


def write_mission_log(path, runner: MissionRunner, header: dict) -> None:
    events = list(runner.world.events)
    events.append({"tick": runner.world.tick, "kind": "final-state",
                   "snapshot": runner.world.snapshot()})
    write_event_log(path, header, events)


def replay_mission(path):
    """Re-run a mission log from its embedded config; returns
    (byte_identical, final_snapshot, recorded_snapshot)."""
    header, events = read_event_log(path)
    cfg = header["config"]
    runner = build_runner(cfg["seed"], zero_noise=cfg["zero_noise"], camera=tuple(cfg["camera"]))
    run_mission(runner, cfg["submissions"])
    replayed = list(runner.world.events)
    replayed.append({"tick": runner.world.tick, "kind": "final-state",
                     "snapshot": runner.world.snapshot()})
    recorded_final = events[-1]["snapshot"]
    final = replayed[-1]["snapshot"]
    identical = [canonical_json(e) for e in replayed] == [canonical_json(e) for e in events]
    return identical, final, recorded_final


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_trial(args) -> int:
    spec = TrialSpec(pipeline=args.pipeline, seed=args.seed,
                     recovery=not args.no_recovery, zero_noise=args.zero_noise)
    result = run_trial(spec)
    line = {
        "pipeline": args.pipeline, "seed": args.seed, "recovery": not args.no_recovery,
        "success": result.success, "sim_time_s": round(result.sim_time, 2),
        "recoveries": result.recovery_triggered, "failure": result.failure_tag,
        "detail": result.detail,
    }
    print(canonical_json(line))
    return 0 if result.success else 1


def _cmd_run(args) -> int:
    cfg = json.loads(Path(args.config).read_text())
    arms = [SuiteArm(pipeline=a["pipeline"], recovery=a.get("recovery", True),
                     label=a.get("label", "")) for a in cfg["arms"]]
    report = run_suite(arms, cfg.get("n_trials", 5), base_seed=cfg.get("base_seed", 0),
                       spec_overrides=cfg.get("overrides"))
    text = format_report(report)
    print(text, end="")
    if args.out:
        Path(args.out).write_text(canonical_json(report) + "\n")
    if args.text:
        Path(args.text).write_text(text)
    return 0


def _cmd_serve(args) -> int:
    from .service import serve

    runner = build_runner(args.seed, zero_noise=args.zero_noise)
    service, httpd = serve(runner, port=args.port, tick_hz=args.tick_hz,
                           static_dir=args.static or None)
    print(f"serving on :{args.port} (seed {args.seed})")
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        service.shutdown()
    return 0


def _cmd_mission(args) -> int:
    subs = []
    for token in args.jobs.split(","):
        kind, sku = token.split(":", 1)
        subs.append({"tick": 0, "kind": kind, "sku": sku})
    runner = build_runner(args.seed, zero_noise=args.zero_noise)
    header = mission_header(args.seed, subs, args.zero_noise, (256, 192))
    run_mission(runner, subs)
    write_mission_log(args.log, runner, header)
    states = [(j.kind, j.sku, j.state) for j in runner.queue.jobs]
    print(canonical_json({"jobs": states, "log": args.log,
                          "final_pose": runner.world.snapshot()["base_pose"]}))
    return 0 if all(s[2] == "done" for s in states) else 1


def _cmd_replay(args) -> int:
    identical, final, recorded = replay_mission(args.log)
    print(canonical_json({
        "identical": identical,
        "final_pose": final["base_pose"],
        "recorded_pose": recorded["base_pose"],
    }))
    return 0 if identical else 1


def _cmd_dump(args) -> int:
    from .orchestration import Services
    from .perception import detect_objects, estimate_normals, normal_std_heatmap, centerness, \
        center_weighted_heatmap, save_pgm

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runner = build_runner(args.seed, zero_noise=args.zero_noise)
    world = runner.world
    sv = runner.services
    world.robot.base_pose = sv.shelf_dock("gauze")
    depth, inst = world.render_view()
    save_pgm(out / "depth.pgm", np.where(np.isfinite(depth), depth, 0.0))
    normals = estimate_normals(depth, world.camera)
    save_pgm(out / "normals_z.pgm", normals.normals[..., 2])
    dets = detect_objects(world, inst)
    record = {"seed": args.seed, "detections": [d.sku for d in dets]}
    if dets:
        mask = dets[0].mask
        flat = normal_std_heatmap(normals, mask, 9)
        cen = centerness(mask)
        weighted = center_weighted_heatmap(flat, cen, 1.0)
        save_pgm(out / "flatness.pgm", flat.values)
        save_pgm(out / "centerness.pgm", cen.values)
        save_pgm(out / "weighted.pgm", weighted.values)
        from .perception import extract_suction_pose

        pose = extract_suction_pose(weighted, normals, depth, world.camera, 10,
                                    cam_pose=world.camera_pose())
        record["suction_pose"] = {
            "sku": dets[0].sku,
            "contact_world": [round(float(v), 4) for v in pose.contact_world],
            "approach_world": [round(float(v), 4) for v in pose.approach_world],
            "score": round(pose.score, 4),
        }
    save_scene(out / "scene.json", world.scene, world.noise)
    sv.grid.save(out / "grid")
    (out / "pose.json").write_text(canonical_json(record) + "\n")
    print(canonical_json({"out": str(out), **record}))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="stockbot",
                                     description="Supply-room logistics robot simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("trial", help="run one pipeline trial")
    p.add_argument("--pipeline", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-recovery", action="store_true")
    p.add_argument("--zero-noise", action="store_true")
    p.set_defaults(fn=_cmd_trial)

    p = sub.add_parser("run", help="run a suite from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--text", help="write the text table here")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("serve", help="serve the live simulation API")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--zero-noise", action="store_true")
    p.add_argument("--tick-hz", type=float, default=20.0)
    p.add_argument("--static", help="directory with the console UI build")
    p.set_defaults(fn=_cmd_serve)

    p = sub.add_parser("mission", help="run jobs and write an event log")
    p.add_argument("--jobs", required=True, help="comma list like retrieve:saline,restock:gauze")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--zero-noise", action="store_true")
    p.add_argument("--log", default="mission.events")
    p.set_defaults(fn=_cmd_mission)

    p = sub.add_parser("replay", help="re-run an event log and verify")
    p.add_argument("log")
    p.set_defaults(fn=_cmd_replay)

    p = sub.add_parser("dump", help="write debug perception artifacts")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--zero-noise", action="store_true")
    p.add_argument("--out", default="dump")
    p.set_defaults(fn=_cmd_dump)

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
