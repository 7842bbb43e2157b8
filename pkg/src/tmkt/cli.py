"""Command-line surface. All subcommands print machine-readable JSON on
stdout and human-readable logs on stderr.

Exit codes: 0 success, 2 usage, 3 config error, 4 data error,
5 numeric error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np
import torch

from . import data, losses, mixing, network, train, variance
from .errors import TmktError

EXIT_CODES = {"config": 3, "data": 4, "numeric": 5}


def _emit(payload: dict) -> None:
    json.dump(payload, sys.stdout, indent=1)
    sys.stdout.write("\n")


def _log(*args) -> None:
    print(*args, file=sys.stderr)


def cmd_gen_data(args) -> int:
    manifest = data.gen_paired_dataset(
        args.out, classes=args.classes, per_class=args.per_class,
        size=args.size, timesteps=args.timesteps, seed=args.seed,
    )
    _emit({"out": args.out, "samples": len(manifest["samples"]),
           "classes": manifest["classes"], "timesteps": manifest["timesteps"]})
    return 0


def cmd_solve_p(args) -> int:
    mode = mixing.MixMode(args.mode)
    p = mixing.solve_p(args.timesteps, args.ratio, mode)
    _emit({
        "timesteps": args.timesteps,
        "ratio": args.ratio,
        "mode": mode.value,
        "p": p,
        "achieved_expectation": mixing.expected_replaced(args.timesteps, p, mode),
        "target_expectation": args.timesteps * args.ratio,
    })
    return 0


def cmd_sample_tstar(args) -> int:
    spec = mixing.MixSpec(timesteps=args.timesteps, r_m=args.ratio,
                          mode=args.mode, schedule=args.schedule, layout=args.layout)
    rng = np.random.default_rng(args.seed)
    counts = np.zeros(args.timesteps + 1, dtype=np.int64)
    replaced = 0
    for _ in range(args.draws):
        t_star = mixing.sample_t_star(spec, rng)
        counts[t_star - 1] += 1
        replaced += args.timesteps + 1 - t_star
    _emit({
        "p": spec.p,
        "draws": args.draws,
        "histogram": {str(t + 1): int(c) for t, c in enumerate(counts)},
        "mean_replaced": replaced / args.draws,
        "target_replaced": args.timesteps * args.ratio,
    })
    return 0


def cmd_mix(args) -> int:
    static = data.load_seq(args.static, data.STATIC, args.label)
    event = data.load_seq(args.event, data.EVENT, args.label)
    if args.tstar is not None:
        sample = mixing.mix_sequence(static, event, args.tstar)
    else:
        spec = mixing.MixSpec(timesteps=static.timesteps, r_m=args.ratio, mode=args.mode)
        sample = mixing.mix_sequence(static, event, mixing.sample_t_star(spec, args.seed))
    if args.out:
        data.save_tensor(args.out, sample.frames)
    _emit({
        "t_star": sample.t_star,
        "modality_labels": sample.modality_labels.tolist(),
        "static_ratio_target": sample.static_ratio_target,
        "out": args.out,
    })
    return 0


def cmd_train(args) -> int:
    cfg = train.RunConfig.from_json(args.config)
    _, records = train.train(cfg, log=_log)
    _emit({"epochs": len(records), "final": records[-1] if records else None,
           "metrics_path": cfg.metrics_path, "checkpoint_path": cfg.checkpoint_path})
    return 0


def cmd_eval(args) -> int:
    cfg = train.RunConfig.from_json(args.config)
    ds = train.PairedArrays(cfg.eval_manifest)
    net = network.SpikingNet(
        in_channels=2, image_size=ds.manifest["image_size"],
        num_classes=ds.num_classes, conv_channels=tuple(cfg.conv_channels),
        hidden=cfg.hidden,
        params=network.LIFParams(cfg.tau, cfg.v_th, cfg.surrogate, cfg.surrogate_width),
    )
    network.load_checkpoint(args.checkpoint, net)
    _emit({"eval_acc": train.evaluate(net, ds), "checkpoint": args.checkpoint})
    return 0


def cmd_varsim(args) -> int:
    if args.model_file:
        payload = json.loads(open(args.model_file).read())
        model = variance.GradientModel.from_dict(payload)
    else:
        model = variance.random_model(
            np.random.default_rng(args.seed),
            dim=args.dim, timesteps=args.timesteps, batch=args.batch,
        )
        if args.alpha is not None:
            n_e = round(args.alpha * model.timesteps)
            model = variance.GradientModel(
                **{**{k: getattr(model, k) for k in (
                    "dim", "mu_a", "mu_e", "sigma_a", "sigma_e",
                    "r_a", "r_e", "r_ae", "timesteps", "batch")},
                   "alpha": n_e / model.timesteps},
            )
    report = variance.build_report(model, args.replications, args.seed)
    sys.stdout.write(report.to_json() + "\n")
    return 0


def cmd_gradvar(args) -> int:
    cfg = train.RunConfig.from_json(args.config)
    ds = train.PairedArrays(cfg.train_manifest)
    torch.manual_seed(cfg.seed)
    net = network.SpikingNet(
        in_channels=2, image_size=ds.manifest["image_size"],
        num_classes=ds.num_classes, conv_channels=tuple(cfg.conv_channels),
        hidden=cfg.hidden,
        params=network.LIFParams(cfg.tau, cfg.v_th, cfg.surrogate, cfg.surrogate_width),
    )
    result = train.measure_gradient_variance(
        net, ds, cfg, args.strategy, args.batches, args.seed, alpha=args.alpha
    )
    _emit(result)
    return 0


def cmd_cka_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    x = torch.from_numpy(rng.standard_normal((16, 6)))
    q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    checks = {
        "self": losses.linear_cka(x, x).item(),
        "orthogonal": losses.linear_cka(x, x @ torch.from_numpy(q)).item(),
        "scaling": losses.linear_cka(x, 3.7 * x).item(),
    }
    checks["pass"] = all(abs(v - 1.0) < 1e-6 for v in checks.values())
    _emit(checks)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tmkt")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a paired static/event dataset")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--size", type=int, default=24)
    p.add_argument("--timesteps", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("solve-p", help="solve the per-step replacement probability")
    p.add_argument("--timesteps", type=int, required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--mode", default="unconditional",
                   choices=[m.value for m in mixing.MixMode])
    p.set_defaults(func=cmd_solve_p)

    p = sub.add_parser("sample-tstar", help="histogram of sampled switch points")
    p.add_argument("--timesteps", type=int, required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--mode", default="unconditional",
                   choices=[m.value for m in mixing.MixMode])
    p.add_argument("--schedule", default="probabilistic",
                   choices=[s.value for s in mixing.Schedule])
    p.add_argument("--layout", default="r2d",
                   choices=[l.value for l in mixing.Layout])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--draws", type=int, default=100000)
    p.set_defaults(func=cmd_sample_tstar)

    p = sub.add_parser("mix", help="mix one static/event sequence pair")
    p.add_argument("--static", required=True)
    p.add_argument("--event", required=True)
    p.add_argument("--label", type=int, default=0)
    p.add_argument("--tstar", type=int, default=None)
    p.add_argument("--ratio", type=float, default=0.4)
    p.add_argument("--mode", default="unconditional")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("train", help="run the two-stream training loop")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="event-only accuracy of a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("varsim", help="analytic vs Monte Carlo covariance report")
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--timesteps", type=int, default=4)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--replications", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-file", default=None)
    p.set_defaults(func=cmd_varsim)

    p = sub.add_parser("gradvar", help="empirical gradient-variance trace")
    p.add_argument("--config", required=True)
    p.add_argument("--strategy", choices=["tsm", "bm"], required=True)
    p.add_argument("--batches", type=int, default=200)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradvar)

    p = sub.add_parser("cka-check", help="CKA invariance self-test")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_cka_check)

    return parser


def cli_dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TmktError as exc:
        _log(f"error [{exc.category}]: {exc}")
        return EXIT_CODES.get(exc.category, 1)


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
