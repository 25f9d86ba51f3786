#!/usr/bin/env python3
"""
railflow: генерация сценариев, прогоны контроллеров, бенчмарк, повтор трасс и сбор данных

    python -m app.main gen --level 0 --seed 7
    python -m app.main run --level 0 --seed 7 --controller full
    python -m app.main bench --level 0..2 --controller full,greedy --seeds 0..9
    python -m app.main replay runs/full/level0-seed7/seed7.jsonl
    python -m app.main collect --level 1,2,3 --seeds 0..4 --filter-failed

Коды выхода: 0 успех, 1 ошибка предметной области, 2 ошибка использования.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

from app.config import settings
from app.core.errors import RailflowError, TraceError
from app.schemas.control import ABLATION_PRESETS, preset
from app.schemas.metrics import BenchmarkReport, LevelReport
from app.schemas.run import RunConfig, parse_seeds
from app.schemas.scenario import Scenario
from app.schemas.trace import Trace

logger = logging.getLogger("railflow")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


def _setup_logging() -> None:
    # Настройка логирования
    logging.basicConfig(
        level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(),
        ]
    )


def _ints(text: str) -> list[int]:
    try:
        return parse_seeds(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def _summary_line(metrics) -> dict:
    return {
        "success_rate": metrics["success_rate"],
        "deadlock_rate": metrics["deadlock_rate"],
        "cancelled_rate": metrics["cancelled_rate"],
        "other_rate": metrics["other_rate"],
        "arrival_delay": metrics["arrival_delay"],
        "peak_active": metrics["peak_active"],
    }


def _episode_options(args) -> dict:
    return {
        "beta": args.beta,
        "budget": args.budget,
        "conflict_window": args.conflict_window,
        "stop_window": args.stop_window,
    }


def _load_scenario(args, seed: int) -> Scenario:
    from app.services.levels import build_scenario, level_spec

    if args.scenario is not None:
        return Scenario.load(args.scenario)
    return build_scenario(level_spec(args.level, args.speed_profile), seed, beta=args.beta)


# --- команды -----------------------------------------------------------------

def cmd_gen(args) -> int:
    """Сценарий уровня: карта и расписание из одного seed"""
    from app.services.levels import build_scenario, level_spec

    scenario = build_scenario(level_spec(args.level, args.speed_profile), args.seed, beta=args.beta)
    out = Path(args.out)
    path = out if out.suffix == ".json" else out / "scenarios" / f"{scenario.name}.json"
    scenario.save(path)
    logger.info(f"✅ Сценарий {scenario.name}: {scenario.n_trains} поездов, "
                f"{scenario.grid.width}x{scenario.grid.height}, записан в {path}")
    print(scenario.map_hash)
    return EXIT_OK


def cmd_run(args) -> int:
    """Эпизоды одного метода: трасса на диск, метрики в stdout"""
    from app.services.runner import run_method

    config = RunConfig(
        method=args.controller, level=args.level, scenario=args.scenario, seeds=args.seeds,
        out=args.out, budget=args.budget, beta=args.beta, conflict_window=args.conflict_window,
        stop_window=args.stop_window, speed_profile=args.speed_profile,
    )
    for seed in config.seeds:
        scenario = _load_scenario(args, seed)
        try:
            trace = run_method(
                scenario, config.method, seed, budget=config.budget,
                conflict_window=config.conflict_window, stop_window=config.stop_window,
            )
        except RailflowError as e:
            raise RailflowError(f"seed {seed}: {e}") from e
        path = trace.save(config.out / config.method / scenario.name / f"seed{seed}.jsonl")
        logger.info(f"✅ Трасса {path}")
        print(json.dumps({"scenario": scenario.name, "seed": seed, "method": config.method,
                          "trace": str(path), **_summary_line(trace.footer.metrics)}))
    return EXIT_OK


def _bench_cell(store, spec, method: str, seeds: list[int], config: RunConfig, args) -> tuple[LevelReport, list[Trace]]:
    from app.services.evaluation import compute_metrics, run_episodes, summarize

    config_hash = config.config_hash()
    missing = [s for s in seeds if store.get(spec.level, method, s, config_hash) is None]
    if missing:
        results = run_episodes(spec, method, missing, _episode_options(args), progress=True, keep_failures=True)
        for seed, trace, error in results:
            if trace is None:
                store.put(spec.level, method, seed, config_hash, error=error)
                continue
            path = trace.save(Path(args.out) / method / f"level{spec.level}" / f"seed{seed}.jsonl")
            store.put(spec.level, method, seed, config_hash, metrics=compute_metrics(trace), trace_path=path)
    else:
        logger.info(f"Уровень {spec.level}, {method}: все эпизоды уже посчитаны")

    episodes, traces, failed = [], [], []
    for seed in seeds:
        metrics = store.get(spec.level, method, seed, config_hash)
        if metrics is None:
            failed.append(seed)
            continue
        episodes.append(metrics)
        path = store.trace_path(spec.level, method, seed, config_hash)
        if path is not None and path.exists():
            traces.append(Trace.load(path))
    report = LevelReport(
        level=spec.level, method=method, seeds=[s for s in seeds if s not in failed],
        config_hash=config_hash, summary=summarize(episodes), episodes=episodes, failed=failed,
    )
    return report, traces


def cmd_bench(args) -> int:
    """Уровни x методы x seed; отчёты CSV/JSON по каталогу на метод"""
    from app.services.evaluation import (
        action_histogram,
        concurrency_trace,
        write_concurrency,
        write_report,
    )
    from app.services.levels import level_spec
    from app.services.results import ResultStore

    methods = [m.strip() for m in args.controller.split(",") if m.strip()]
    levels = args.level_list
    out = Path(args.out)
    store = ResultStore(out)
    any_failed = False
    for method in methods:
        report = BenchmarkReport()
        for level in levels:
            config = RunConfig(
                method=method, level=level, seeds=args.seeds, out=out, budget=args.budget, beta=args.beta,
                conflict_window=args.conflict_window, stop_window=args.stop_window,
                speed_profile=args.speed_profile,
            )
            spec = level_spec(level, args.speed_profile)
            cell, traces = _bench_cell(store, spec, method, args.seeds, config, args)
            report.reports.append(cell)
            if cell.failed:
                any_failed = True
                logger.error(f"❌ Уровень {level}, {method}: ошибки на seed {cell.failed}")
            if traces:
                write_concurrency(concurrency_trace(traces), out / method / f"concurrency_level{level}.csv")
                action_histogram(traces).to_frame().to_csv(out / method / f"actions_level{level}.csv", index=False)
        csv_path, _ = write_report(report, out / method)
        logger.info(f"✅ Отчёт {method}: {csv_path}")
        for cell in report.reports:
            print(json.dumps({
                "method": method, "level": cell.level, "failed": cell.failed,
                **{k: round(v.mean, 4) for k, v in cell.summary.items()},
            }))
    return EXIT_DOMAIN if any_failed else EXIT_OK


def cmd_replay(args) -> int:
    """Пересимуляция трассы; расхождение событий даёт код 1"""
    from app.services.runner import replay

    trace = Trace.load(args.trace)
    verdict = replay(trace)
    if verdict.ok:
        logger.info(f"✅ Трасса совпадает: {verdict.ticks} шагов")
        print("OK")
        return EXIT_OK
    logger.error(f"❌ Расхождение на шаге {verdict.divergent_tick}: {verdict.detail}")
    print(f"DIVERGED {verdict.divergent_tick}")
    return EXIT_DOMAIN


def cmd_collect(args) -> int:
    """Набор данных решений контроллера для обучения с учителем"""
    from app.services.dataset import collect_bc_dataset
    from app.services.levels import build_scenario, level_spec

    if args.scenario is not None:
        scenario = Scenario.load(args.scenario)
        episodes = [(scenario, seed) for seed in args.seeds]
    else:
        episodes = [
            (build_scenario(level_spec(level, args.speed_profile), seed, beta=args.beta), seed)
            for level in args.level_list for seed in args.seeds
        ]
    config = preset(args.controller, conflict_window=args.conflict_window,
                    stop_window=args.stop_window, budget=args.budget)
    out = Path(args.out)
    path = out if out.suffix == ".jsonl" else out / "dataset.jsonl"
    manifest = collect_bc_dataset(episodes, config, path, filter_failed=args.filter_failed, progress=True)
    print(manifest.model_dump_json())
    return EXIT_OK


def cmd_concurrency(args) -> int:
    """Активные поезда по шагам для нескольких профилей скоростей"""
    from app.services.evaluation import concurrency_by_profile, write_concurrency_profiles
    from app.services.levels import level_spec

    profiles = [p.strip() for p in args.profiles.split(";") if p.strip()]
    summaries = concurrency_by_profile(
        level_spec(args.level), profiles, args.seeds, method=args.controller, options=_episode_options(args),
    )
    path = write_concurrency_profiles(summaries, Path(args.out) / f"concurrency_profiles_level{args.level}.csv")
    logger.info(f"✅ Ряды концентрации: {path}")
    for profile, summary in summaries.items():
        print(json.dumps({
            "profile": profile, "peak": round(summary.peak, 3),
            "mean_length": sum(summary.episode_lengths) / len(summary.episode_lengths),
        }))
    return EXIT_OK


# --- разбор аргументов --------------------------------------------------------

def _add_knobs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--controller", default="full", help="метод: full, greedy, mads-greedy, greedy-mapf, "
                                                     "deadlock-avoidance, mcts, random, pp")
    p.add_argument("--budget", type=int, default=None, help="бюджет симуляций MCTS")
    p.add_argument("--beta", type=float, default=None, help="множитель горизонта эпизода")
    p.add_argument("--conflict-window", type=int, default=None)
    p.add_argument("--stop-window", type=int, default=None)
    p.add_argument("--speed-profile", default=None, help="constant или fractional:1,0.5")
    p.add_argument("--out", default="runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="railflow", description="railflow - диспетчеризация поездов на сетке")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="сгенерировать сценарий")
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--speed-profile", default=None)
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="прогнать эпизоды и записать трассы")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--level", type=int)
    src.add_argument("--scenario", type=Path)
    seeds = p.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int, dest="seed")
    seeds.add_argument("--seeds", type=_ints, dest="seed_list")
    _add_knobs(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="бенчмарк по уровням и методам")
    p.add_argument("--level", type=_ints, dest="level_list", default=[0, 1, 2, 3, 4])
    p.add_argument("--seeds", type=_ints, dest="seed_list", default=list(range(50)))
    _add_knobs(p)
    p.set_defaults(func=cmd_bench, controller=",".join(ABLATION_PRESETS))

    p = sub.add_parser("replay", help="проверить трассу пересимуляцией")
    p.add_argument("trace", type=Path)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("collect", help="собрать набор данных решений")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--level", type=_ints, dest="level_list")
    src.add_argument("--scenario", type=Path)
    p.add_argument("--seeds", type=_ints, dest="seed_list", default=[0])
    p.add_argument("--filter-failed", action="store_true")
    _add_knobs(p)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("concurrency", help="концентрация поездов при разных профилях скоростей")
    p.add_argument("--level", type=int, default=4)
    p.add_argument("--seeds", type=_ints, dest="seed_list", default=list(range(10)))
    p.add_argument("--profiles", default="constant;fractional:1,0.5",
                   help="профили через точку с запятой")
    _add_knobs(p)
    p.set_defaults(func=cmd_concurrency)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging()

    # --seed N и --seeds A..B сводятся к одному списку
    seed = getattr(args, "seed", None)
    seed_list = getattr(args, "seed_list", None)
    args.seeds = seed_list or ([seed] if seed is not None else [0])
    for name in ("level", "scenario", "speed_profile", "beta", "budget", "conflict_window", "stop_window"):
        if not hasattr(args, name):
            setattr(args, name, None)

    try:
        return args.func(args)
    except ValueError as e:
        # включая ValidationError pydantic
        logger.error(f"❌ Неверные параметры: {e}")
        return EXIT_USAGE
    except TraceError as e:
        logger.error(f"❌ Ошибка трассы: {e}")
        return EXIT_DOMAIN
    except RailflowError as e:
        logger.error(f"❌ {e}")
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
