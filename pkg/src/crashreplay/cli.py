"""Operator entry points: build-index, extract, replay, eval.

Exit codes: 0 success (or crash reproduced), 1 domain failure (not
reproduced, no entities, scoring failure), 2 usage error, 3 environment
error (missing files, missing env vars, unreachable endpoint/device).
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import click

from . import evaluator, replay
from .gateway import GatewayError, HttpGateway, LlmConfig, MockGateway
from .grammar import NoEntitiesFound, S2RScript, parse_extraction_response
from .rag import (
    HashedTrigramProvider,
    HttpEmbeddingProvider,
    RagError,
    RagIndex,
    build_index,
    load_corpus,
    load_index,
    retrieve,
    save_index,
    segment_report,
)
from .simulator import SimulatorDevice, SpecInvalid, load_spec

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2
EXIT_ENVIRONMENT = 3

#: Default wall-clock replay budget (seconds) and exploration depth.
DEFAULT_BUDGET_S = 300.0
DEFAULT_DEPTH = 1
DEFAULT_RETRIEVAL_K = 1
DEFAULT_EXPLORE_ACTIONS = 40


def fixtures_path() -> Path:
    """Directory of the bundled corpora, app specs and scenarios."""
    return Path(str(resources.files("crashreplay").joinpath("fixtures")))


@dataclass
class RunConfig:
    corpus_path: str | None = None
    index_path: str | None = None
    sim_spec_path: str | None = None
    device_serial: str | None = None
    app_package: str | None = None
    app_activity: str | None = None
    gateway_mode: str = "mock"
    mock_script_path: str | None = None
    budget_s: float = DEFAULT_BUDGET_S
    depth: int = DEFAULT_DEPTH
    retrieval_k: int = DEFAULT_RETRIEVAL_K
    exploration: bool = True
    explore_actions: int = DEFAULT_EXPLORE_ACTIONS
    max_iterations: int | None = None
    output_dir: str = "out"

    def validate(self) -> None:
        if bool(self.sim_spec_path) == bool(self.device_serial):
            raise click.UsageError("exactly one of --sim-spec / --device-serial is required")
        if self.gateway_mode == "mock" and not self.mock_script_path:
            raise click.UsageError("mock gateway mode requires --mock-script")


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _read_file(path: str, what: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        _fail(EXIT_ENVIRONMENT, f"cannot read {what} {path}: {exc}")
        raise AssertionError  # unreachable


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        _fail(EXIT_ENVIRONMENT, f"cannot read config {path}: {exc}")
        raise AssertionError


def _pick(flag, config: dict, key: str, default):
    """Flag wins over config file; config wins over the built-in default."""
    if flag is not None:
        return flag
    if key in config:
        return config[key]
    return default


def provider_for_index(index: RagIndex, endpoint: str | None = None):
    """Reconstruct the embedding provider an index was built with."""
    if index.provider_id.startswith("hashed-trigram-"):
        return HashedTrigramProvider(index.dimension)
    if endpoint:
        return HttpEmbeddingProvider(endpoint, index.dimension, provider_id=index.provider_id)
    raise RagError(
        f"index was built with provider {index.provider_id!r}; pass its endpoint to query it"
    )


def _make_gateway(mode: str, mock_script: str | None):
    if mode == "mock":
        if not mock_script:
            raise click.UsageError("mock gateway mode requires --mock-script")
        try:
            return MockGateway.from_script_file(mock_script)
        except (OSError, ValueError) as exc:
            _fail(EXIT_ENVIRONMENT, f"cannot load mock script {mock_script}: {exc}")
    try:
        return HttpGateway(LlmConfig.from_env())
    except GatewayError as exc:
        _fail(EXIT_ENVIRONMENT, str(exc))
    raise AssertionError


@click.group()
@click.option("--config", "config_path", type=str, default=None, help="JSON config file; flags win.")
@click.pass_context
def main(ctx: click.Context, config_path: str | None) -> None:
    """Reproduce Android app crashes from natural-language bug reports.

    Exit codes: 0 success / crash reproduced, 1 domain failure (not
    reproduced, no steps extracted), 2 usage error, 3 environment error.
    """
    ctx.obj = _load_config_file(config_path)


@main.command("build-index")
@click.option("--corpus", "corpus_path", default=None, help="Line-delimited labeled corpus file.")
@click.option("--out", "out_path", default=None, help="Index file to write.")
@click.option("--dimension", type=int, default=None, help="Embedding dimension (offline provider).")
@click.option("--embed-endpoint", default=None, help="Remote embedding endpoint (optional).")
@click.pass_context
def cmd_build_index(ctx, corpus_path, out_path, dimension, embed_endpoint):
    """Embed a labeled corpus into a persisted retrieval index."""
    config = ctx.obj or {}
    corpus_path = _pick(corpus_path, config, "corpus_path", None)
    out_path = _pick(out_path, config, "index_path", "index.json")
    dimension = _pick(dimension, config, "dimension", 384)
    if not corpus_path:
        raise click.UsageError("--corpus is required")
    if not Path(corpus_path).exists():
        _fail(EXIT_ENVIRONMENT, f"corpus file not found: {corpus_path}")
    try:
        corpus = load_corpus(corpus_path)
        if embed_endpoint:
            provider = HttpEmbeddingProvider(embed_endpoint, dimension)
        else:
            provider = HashedTrigramProvider(dimension)
        index = build_index(corpus, provider)
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        save_index(index, out_path)
    except RagError as exc:
        _fail(EXIT_DOMAIN, str(exc))
    click.echo(f"{len(index)} records")


def run_extraction(
    report_text: str, index: RagIndex, gateway, k: int, endpoint: str | None = None
) -> tuple[S2RScript, dict]:
    """Segment, retrieve, prompt, parse; returns the script and a full log."""
    from .grammar import build_extraction_prompt

    sentences = segment_report(report_text)
    if not sentences:
        raise NoEntitiesFound("report contains no sentences")
    provider = provider_for_index(index, endpoint)
    hits = []
    for sentence in sentences:
        for hit in retrieve(index, sentence, k, provider):
            hits.append((hit.record.sentence, list(hit.record.labels)))
    prompt = build_extraction_prompt(sentences, hits)
    raw = gateway.complete(prompt)
    script = parse_extraction_response(raw)
    log = {
        "sentences": sentences,
        "retrieved": [h[0] for h in hits],
        "prompt": prompt,
        "response": raw,
    }
    return script, log


@main.command("extract")
@click.option("--report", "report_path", required=True, help="Bug report text file.")
@click.option("--index", "index_path", default=None, help="Retrieval index file.")
@click.option("--gateway", "gateway_mode", type=click.Choice(["mock", "live"]), default=None)
@click.option("--mock-script", default=None, help="Scripted responses for the mock gateway.")
@click.option("--k", type=int, default=None, help="Retrieved examples per sentence.")
@click.option("--out", "out_dir", default=None, help="Output directory.")
@click.pass_context
def cmd_extract(ctx, report_path, index_path, gateway_mode, mock_script, k, out_dir):
    """Extract a reproduction script from a bug report."""
    config = ctx.obj or {}
    index_path = _pick(index_path, config, "index_path", None)
    gateway_mode = _pick(gateway_mode, config, "gateway_mode", "mock")
    mock_script = _pick(mock_script, config, "mock_script_path", None)
    k = _pick(k, config, "retrieval_k", DEFAULT_RETRIEVAL_K)
    out_dir = Path(_pick(out_dir, config, "output_dir", "out"))
    if not index_path:
        raise click.UsageError("--index is required")
    if not Path(index_path).exists():
        _fail(EXIT_ENVIRONMENT, f"index file not found: {index_path}")
    report_text = _read_file(report_path, "report")
    gateway = _make_gateway(gateway_mode, mock_script)
    try:
        index = load_index(index_path)
        script, log = run_extraction(report_text, index, gateway, k)
    except NoEntitiesFound as exc:
        _fail(EXIT_DOMAIN, str(exc))
        raise AssertionError
    except (RagError, GatewayError) as exc:
        _fail(EXIT_DOMAIN, str(exc))
        raise AssertionError
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "script.json").write_text(
        json.dumps(script.to_dict(), indent=1, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    (out_dir / "extraction_log.json").write_text(
        json.dumps(log, indent=1, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    click.echo(f"{len(script.steps)} steps -> {out_dir / 'script.json'}")


def _make_device(config: RunConfig):
    if config.sim_spec_path:
        if not Path(config.sim_spec_path).exists():
            _fail(EXIT_ENVIRONMENT, f"app spec not found: {config.sim_spec_path}")
        try:
            return SimulatorDevice(load_spec(config.sim_spec_path))
        except SpecInvalid as exc:
            _fail(EXIT_ENVIRONMENT, str(exc))
            raise AssertionError
    from .adb_bridge import AdbDevice

    if not config.app_package:
        raise click.UsageError("--app-package is required with --device-serial")
    return AdbDevice(config.device_serial, config.app_package, config.app_activity)


@main.command("replay")
@click.option("--report", "report_path", required=True, help="Bug report text file.")
@click.option("--script", "script_path", default=None, help="Extracted script JSON.")
@click.option("--sim-spec", default=None, help="Simulated app spec file.")
@click.option("--device-serial", default=None, help="adb serial of a real device.")
@click.option("--app-package", default=None)
@click.option("--app-activity", default=None)
@click.option("--gateway", "gateway_mode", type=click.Choice(["mock", "live"]), default=None)
@click.option("--mock-script", default=None)
@click.option("--budget", "budget_s", type=float, default=None, help="Wall-clock budget (s).")
@click.option("--depth", type=int, default=None, help="Exploration depth.")
@click.option("--explore-actions", type=int, default=None, help="Exploration action budget.")
@click.option("--exploration/--no-exploration", "exploration", default=None)
@click.option("--max-iterations", type=int, default=None, help="Deterministic iteration cap.")
@click.option("--utg-cache", default=None, help="Directory for cached exploration knowledge.")
@click.option("--out", "out_dir", default=None, help="Output directory.")
@click.pass_context
def cmd_replay(ctx, report_path, script_path, sim_spec, device_serial, app_package, app_activity,
               gateway_mode, mock_script, budget_s, depth, explore_actions, exploration,
               max_iterations, utg_cache, out_dir):
    """Replay a bug report against a device until it crashes; exit 0 iff reproduced."""
    config_file = ctx.obj or {}
    config = RunConfig(
        sim_spec_path=_pick(sim_spec, config_file, "sim_spec_path", None),
        device_serial=_pick(device_serial, config_file, "device_serial", None),
        app_package=_pick(app_package, config_file, "app_package", None),
        app_activity=_pick(app_activity, config_file, "app_activity", None),
        gateway_mode=_pick(gateway_mode, config_file, "gateway_mode", "mock"),
        mock_script_path=_pick(mock_script, config_file, "mock_script_path", None),
        budget_s=float(_pick(budget_s, config_file, "budget_s", DEFAULT_BUDGET_S)),
        depth=int(_pick(depth, config_file, "depth", DEFAULT_DEPTH)),
        exploration=_pick(exploration, config_file, "exploration", True),
        explore_actions=int(_pick(explore_actions, config_file, "explore_actions", DEFAULT_EXPLORE_ACTIONS)),
        max_iterations=_pick(max_iterations, config_file, "max_iterations", None),
        output_dir=_pick(out_dir, config_file, "output_dir", "out"),
    )
    config.validate()
    report_text = _read_file(report_path, "report")
    if script_path:
        try:
            script = S2RScript.from_dict(json.loads(_read_file(script_path, "script")))
        except (ValueError, KeyError) as exc:
            _fail(EXIT_ENVIRONMENT, f"bad script file {script_path}: {exc}")
            raise AssertionError
    else:
        script = S2RScript(steps=())
    device = _make_device(config)
    gateway = _make_gateway(config.gateway_mode, config.mock_script_path)

    result = replay.run(
        report_text,
        script,
        device,
        gateway,
        config.budget_s,
        explore_enabled=config.exploration,
        explore_depth=config.depth,
        explore_action_budget=config.explore_actions,
        max_iterations=config.max_iterations,
        utg_cache_dir=utg_cache,
    )
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.jsonl").write_text(result.trace_text(), encoding="utf-8")
    (out / "result.json").write_text(
        json.dumps(result.summary_dict(), indent=1, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    click.echo(
        f"{result.outcome.value} after {result.steps_executed} commands "
        f"in {result.elapsed:.2f}s (llm {result.llm_time:.2f}s)"
    )
    sys.exit(EXIT_OK if result.outcome == replay.Outcome.REPRODUCED else EXIT_DOMAIN)


def _run_scenario(scenario_dir: Path, index: RagIndex, out_dir: Path):
    """Run one scenario directory; returns (score or None, ReplayResult)."""
    spec_file = scenario_dir / "scenario.json"
    raw = json.loads(spec_file.read_text(encoding="utf-8"))
    report_text = (scenario_dir / raw["report"]).read_text(encoding="utf-8")
    app_spec = load_spec(scenario_dir / raw["app"])

    score = None
    script = S2RScript(steps=())
    if raw.get("extract_mock"):
        gateway = MockGateway.from_script_file(scenario_dir / raw["extract_mock"])
        script, log = run_extraction(report_text, index, gateway, raw.get("k", DEFAULT_RETRIEVAL_K))
        (out_dir / "script.json").write_text(
            json.dumps(script.to_dict(), indent=1, ensure_ascii=False) + "\n", encoding="utf-8"
        )
        if raw.get("gold_script"):
            gold = S2RScript.from_dict(
                json.loads((scenario_dir / raw["gold_script"]).read_text(encoding="utf-8"))
            )
            score = evaluator.score_extraction(script, gold)

    gateway = MockGateway.from_script_file(scenario_dir / raw["replay_mock"])
    result = replay.run(
        report_text,
        script,
        SimulatorDevice(app_spec),
        gateway,
        float(raw.get("budget_s", 10.0)),
        explore_enabled=bool(raw.get("exploration", True)),
        explore_depth=int(raw.get("depth", DEFAULT_DEPTH)),
        explore_action_budget=int(raw.get("explore_actions", DEFAULT_EXPLORE_ACTIONS)),
        max_iterations=raw.get("max_iterations"),
    )
    (out_dir / "trace.jsonl").write_text(result.trace_text(), encoding="utf-8")
    (out_dir / "result.json").write_text(
        json.dumps(result.summary_dict(), indent=1, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    return score, result


@main.command("eval")
@click.option("--scenarios", "scenarios_dir", required=True, help="Directory of scenario subdirs.")
@click.option("--corpus", "corpus_path", default=None, help="Labeled corpus for retrieval.")
@click.option("--out", "out_dir", default=None, help="Output directory.")
@click.pass_context
def cmd_eval(ctx, scenarios_dir, corpus_path, out_dir):
    """Score extraction and aggregate replay outcomes over a scenario suite."""
    config = ctx.obj or {}
    corpus_path = _pick(corpus_path, config, "corpus_path", str(fixtures_path() / "corpus_small.jsonl"))
    out = Path(_pick(out_dir, config, "output_dir", "out"))
    scenarios_root = Path(scenarios_dir)
    if not scenarios_root.is_dir():
        _fail(EXIT_ENVIRONMENT, f"scenario directory not found: {scenarios_dir}")
    if not Path(corpus_path).exists():
        _fail(EXIT_ENVIRONMENT, f"corpus file not found: {corpus_path}")

    corpus = load_corpus(corpus_path)
    index = build_index(corpus, HashedTrigramProvider())

    scores = []
    results = []
    hashes = {"corpus": hashlib.sha256(Path(corpus_path).read_bytes()).hexdigest()}
    out.mkdir(parents=True, exist_ok=True)
    for scenario_dir in sorted(p for p in scenarios_root.iterdir() if p.is_dir()):
        if not (scenario_dir / "scenario.json").exists():
            continue
        scenario_out = out / scenario_dir.name
        scenario_out.mkdir(parents=True, exist_ok=True)
        try:
            score, result = _run_scenario(scenario_dir, index, scenario_out)
        except (OSError, ValueError, KeyError, SpecInvalid, RagError, GatewayError, NoEntitiesFound) as exc:
            _fail(EXIT_DOMAIN, f"scenario {scenario_dir / 'scenario.json'}: {exc}")
            raise AssertionError
        hashes[scenario_dir.name] = hashlib.sha256(
            (scenario_dir / "scenario.json").read_bytes()
        ).hexdigest()
        if score is not None:
            scores.append(score)
        results.append(result)

    merged = evaluator.merge_scores(scores) if scores else None
    aggregate = evaluator.aggregate_replays(results) if results else None
    text = evaluator.emit_report(merged, aggregate)
    fingerprint = hashlib.sha256(
        json.dumps({"scenarios": str(scenarios_root), "corpus": str(corpus_path)}).encode()
    ).hexdigest()
    payload = evaluator.report_payload(merged, aggregate, config_fingerprint=fingerprint, input_hashes=hashes)
    (out / "report.txt").write_text(text, encoding="utf-8")
    (out / "report.json").write_text(
        json.dumps(payload, indent=1, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    click.echo(text, nl=False)
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
