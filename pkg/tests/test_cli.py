"""CLI wiring: config precedence, the forecast/curate/resolve/score/probe
commands run end to end over fixtures, resume semantics, and exit codes."""

import json
from datetime import date, datetime, timedelta, timezone
from pathlib import Path

import pytest

from agentcast import cli
from agentcast.cli import (
    EXIT_EMPTY,
    EXIT_FATAL,
    EXIT_OK,
    ConfigError,
    RunConfig,
    load_config,
    make_member_runner,
    resolve_config,
    run_forecast,
)
from agentcast.llm import ReplayBackend, ScriptedBackend, UsageMeter, leakage_probe, record_mode
from agentcast.market import classify_category, llm_filter
from agentcast.metrics import parse_table
from agentcast.models import read_questions, read_records, write_questions
from agentcast.tools import FixtureSearchProvider

from conftest import FIXTURES, make_question

E2E = FIXTURES / "e2e"


# --- configuration -------------------------------------------------------------


def test_load_config_file_values_beat_defaults(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"ensemble_size": 5, "cutoff": "2024-04-15", "workers": 2}))
    cfg = load_config(path)
    assert cfg.ensemble_size == 5
    assert cfg.cutoff == "2024-04-15"
    assert cfg.workers == 2
    assert cfg.aggregator == "median"  # untouched default


def test_load_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"ensembel_size": 5, "zzz": 1}))
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert "ensembel_size" in str(err.value) and "zzz" in str(err.value)


def test_load_config_rejects_malformed_json(tmp_path):
    path = tmp_path / "run.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(path)


def test_flags_override_config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"ensemble_size": 5, "aggregator": "mean", "seed": 11}))
    ns = cli.build_parser().parse_args(
        ["forecast", "--dataset", "d", "--out", "o", "--config", str(path), "--ensemble", "7", "--seed", "3"]
    )
    cfg = resolve_config(ns)
    assert cfg.ensemble_size == 7  # flag wins
    assert cfg.seed == 3
    assert cfg.aggregator == "mean"  # file value survives where no flag given


def test_resolve_config_rejects_nonpositive_sizes():
    ns = cli.build_parser().parse_args(["forecast", "--dataset", "d", "--out", "o", "--ensemble", "0"])
    with pytest.raises(ConfigError, match="ensemble size"):
        resolve_config(ns)


def test_cutoff_date_validation():
    with pytest.raises(ConfigError, match="no cutoff"):
        RunConfig().cutoff_date()
    with pytest.raises(ConfigError, match="malformed cutoff"):
        RunConfig(cutoff="04/15/2024").cutoff_date()
    tomorrow = (date.today() + timedelta(days=1)).isoformat()
    with pytest.raises(ConfigError, match="future"):
        RunConfig(cutoff=tomorrow).cutoff_date()
    assert RunConfig(cutoff="2024-04-15").cutoff_date() == date(2024, 4, 15)


# --- forecast ------------------------------------------------------------------


def replay_forecast(out_dir, *extra):
    return cli.main(
        [
            "forecast",
            "--dataset",
            str(E2E / "questions.jsonl"),
            "--out",
            str(out_dir),
            "--search-fixture",
            str(E2E / "search.jsonl"),
            "--cassette",
            str(E2E / "cassette.jsonl"),
            "--cutoff",
            "2024-04-15",
            *extra,
        ]
    )


def test_forecast_replay_end_to_end(tmp_path):
    out = tmp_path / "run"
    assert replay_forecast(out) == EXIT_OK

    records = {r.question_id: r for r in read_records(out / "forecasts.jsonl")}
    assert len(records) == 5
    assert records["q_eth"].aggregate.value == 0.35
    assert records["q_un"].declined and records["q_un"].aggregate is None
    assert records["q_btc"].aggregate.value == 0.4
    assert all(len(r.members) == 3 for r in records.values())

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["questions"]["q_un"] == "declined"
    assert sum(1 for s in manifest["questions"].values() if s == "forecasted") == 4
    assert manifest["token_usage"]["calls"] == 29

    # every member forecast points at a planner transcript on disk
    for record in records.values():
        for member in record.members:
            assert (out / "transcripts" / member.transcript_ref).exists()


def test_forecast_replay_is_deterministic(tmp_path):
    assert replay_forecast(tmp_path / "a") == EXIT_OK
    assert replay_forecast(tmp_path / "b") == EXIT_OK
    first = (tmp_path / "a" / "forecasts.jsonl").read_bytes()
    second = (tmp_path / "b" / "forecasts.jsonl").read_bytes()
    assert first == second


def test_forecast_replay_forces_sequential(tmp_path):
    # --workers 4 under replay must not race the cassette; output identical
    assert replay_forecast(tmp_path / "a") == EXIT_OK
    assert replay_forecast(tmp_path / "b", "--workers", "4") == EXIT_OK
    assert (tmp_path / "a" / "forecasts.jsonl").read_bytes() == (
        tmp_path / "b" / "forecasts.jsonl"
    ).read_bytes()


def counting_runner(counter):
    cfg = RunConfig(cutoff="2024-04-15")
    backend = UsageMeter(ReplayBackend.from_file(E2E / "cassette.jsonl"))
    provider = FixtureSearchProvider.from_file(E2E / "search.jsonl")
    inner = make_member_runner(cfg, backend, provider)

    def run(question):
        counter[question.id] = counter.get(question.id, 0) + 1
        return inner(question)

    return run


def test_run_forecast_resumes_only_missing_questions(tmp_path):
    dataset = read_questions(E2E / "questions.jsonl")
    out = tmp_path / "run"

    first_calls = {}
    run_forecast(
        dataset, counting_runner(first_calls), out, ensemble_size=3, aggregator_mode="median", seed=0
    )
    assert first_calls == {q.id: 3 for q in dataset}
    original = (out / "forecasts.jsonl").read_bytes()

    # drop two records and plant a stale one that is not in the dataset
    kept = [r for r in read_records(out / "forecasts.jsonl") if r.question_id not in ("q_fed", "q_btc")]
    with open(out / "forecasts.jsonl", "w", encoding="utf-8") as fh:
        for r in kept:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")
        ghost = dict(kept[0].to_dict(), question_id="ghost")
        fh.write(json.dumps(ghost, ensure_ascii=False) + "\n")

    second_calls = {}
    statuses = run_forecast(
        dataset, counting_runner(second_calls), out, ensemble_size=3, aggregator_mode="median", seed=0
    )
    assert second_calls == {"q_fed": 3, "q_btc": 3}  # others resumed from disk
    assert statuses["q_eth"] == "forecasted" and statuses["q_un"] == "declined"
    assert (out / "forecasts.jsonl").read_bytes() == original  # dataset order, ghost gone


def test_forecast_empty_dataset_exits_2(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    rc = cli.main(
        ["forecast", "--dataset", str(empty), "--out", str(tmp_path / "o"), "--cutoff", "2024-04-15"]
    )
    assert rc == EXIT_EMPTY


def test_forecast_without_cassette_needs_api_env(tmp_path, monkeypatch):
    monkeypatch.delenv("LLM_API_KEY", raising=False)
    rc = cli.main(
        [
            "forecast",
            "--dataset",
            str(E2E / "questions.jsonl"),
            "--out",
            str(tmp_path / "o"),
            "--search-fixture",
            str(E2E / "search.jsonl"),
            "--cutoff",
            "2024-04-15",
        ]
    )
    assert rc == EXIT_FATAL


def test_forecast_future_cutoff_is_fatal(tmp_path):
    tomorrow = (date.today() + timedelta(days=1)).isoformat()
    rc = replay_forecast(tmp_path / "o", "--cutoff", tomorrow)
    assert rc == EXIT_FATAL


def test_missing_dataset_is_fatal(tmp_path):
    rc = cli.main(
        ["forecast", "--dataset", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o"), "--cutoff", "2024-04-15"]
    )
    assert rc == EXIT_FATAL


# --- curate / resolve ------------------------------------------------------------


def ms(iso: str) -> int:
    moment = datetime.fromisoformat(iso).replace(tzinfo=timezone.utc)
    return int(moment.timestamp() * 1000)


def write_market_fixture(path: Path) -> None:
    markets = [
        {
            "id": "mkt_rates",
            "question": "Will the central bank cut rates before July?",
            "closeTime": ms("2024-05-10T12:00:00"),
            "probability": 0.22,
            "isResolved": False,
            "resolution": None,
            "outcomeType": "BINARY",
        },
        {
            "id": "mkt_personal",
            "question": "Will I finish my thesis this month?",
            "closeTime": ms("2024-05-20T12:00:00"),
            "probability": 0.5,
            "isResolved": False,
            "resolution": None,
            "outcomeType": "BINARY",
        },
        {
            "id": "mkt_multi",
            "question": "Which team wins the cup?",
            "closeTime": ms("2024-05-15T12:00:00"),
            "probability": 0.3,
            "isResolved": False,
            "resolution": None,
            "outcomeType": "MULTIPLE_CHOICE",
        },
        {
            "id": "mkt_late",
            "question": "Will the election be contested?",
            "closeTime": ms("2024-07-01T12:00:00"),
            "probability": 0.4,
            "isResolved": False,
            "resolution": None,
            "outcomeType": "BINARY",
        },
    ]
    path.write_text(json.dumps({"markets": markets}, indent=2))


def record_curate_cassette(path: Path) -> None:
    # same calls cmd_curate makes, in the same order, so fingerprints line up
    backend = record_mode(ScriptedBackend(["Yes", "No", "Economics & Business"]), path)
    assert llm_filter(backend, "Will the central bank cut rates before July?").keep
    assert not llm_filter(backend, "Will I finish my thesis this month?").keep
    classify_category(backend, "Will the central bank cut rates before July?")
    backend.close()


def test_curate_filters_and_snapshots(tmp_path, capsys):
    market_fixture = tmp_path / "markets.jsonl"
    write_market_fixture(market_fixture)
    cassette = tmp_path / "curate_cassette.jsonl"
    record_curate_cassette(cassette)
    out = tmp_path / "dataset.jsonl"

    rc = cli.main(
        [
            "curate",
            "--from",
            "2024-05-01",
            "--to",
            "2024-05-31",
            "--out",
            str(out),
            "--at",
            "2024-04-15T00:00:00Z",
            "--market-fixture",
            str(market_fixture),
            "--cassette",
            str(cassette),
        ]
    )
    assert rc == EXIT_OK

    questions = read_questions(out)
    assert [q.id for q in questions] == ["mkt_rates"]
    q = questions[0]
    assert q.crowd_prob == 0.22
    assert q.category.value == "Economics & Business"
    assert q.fetched_at == datetime(2024, 4, 15, tzinfo=timezone.utc)
    assert q.close_time == datetime(2024, 5, 10, 12, tzinfo=timezone.utc)

    audit = [json.loads(line) for line in (tmp_path / "dataset.audit.jsonl").read_text().splitlines()]
    assert [(a["market_id"], a["verdict"]) for a in audit] == [
        ("mkt_rates", "keep"),
        ("mkt_personal", "drop"),
    ]
    stdout = capsys.readouterr().out
    assert "fetched 2 binary markets, kept 1, dropped 1" in stdout
    assert "Economics & Business" in stdout


def test_curate_empty_window_exits_2(tmp_path):
    market_fixture = tmp_path / "markets.jsonl"
    write_market_fixture(market_fixture)
    out = tmp_path / "dataset.jsonl"
    rc = cli.main(
        [
            "curate",
            "--from",
            "2023-01-01",
            "--to",
            "2023-01-31",
            "--out",
            str(out),
            "--market-fixture",
            str(market_fixture),
        ]
    )
    assert rc == EXIT_EMPTY
    assert out.exists() and out.read_text() == ""


def test_resolve_backfills_outcomes(tmp_path, capsys):
    dataset = tmp_path / "dataset.jsonl"
    write_questions(
        dataset,
        [
            make_question(qid="mkt_yes", source="market"),
            make_question(qid="mkt_open", source="market"),
            make_question(qid="mkt_na", source="market"),
        ],
    )
    markets = [
        {"id": "mkt_yes", "isResolved": True, "resolution": "YES"},
        {"id": "mkt_open", "isResolved": False, "resolution": None},
        {"id": "mkt_na", "isResolved": True, "resolution": "CANCEL"},
    ]
    market_fixture = tmp_path / "markets.json"
    market_fixture.write_text(json.dumps({"markets": markets}, indent=2))

    rc = cli.main(["resolve", "--dataset", str(dataset), "--market-fixture", str(market_fixture)])
    assert rc == EXIT_OK
    assert "resolved 1, pending 1, excluded 1" in capsys.readouterr().out

    by_id = {q.id: q for q in read_questions(dataset)}
    assert by_id["mkt_yes"].outcome == 1
    assert by_id["mkt_open"].outcome is None and not by_id["mkt_open"].excluded
    assert by_id["mkt_na"].outcome is None and by_id["mkt_na"].excluded


# --- score -----------------------------------------------------------------------


def test_score_end_to_end(tmp_path, capsys):
    run_dir = tmp_path / "run"
    assert replay_forecast(run_dir) == EXIT_OK
    agent_path = tmp_path / "agent.jsonl"
    agent_path.write_bytes((run_dir / "forecasts.jsonl").read_bytes())
    capsys.readouterr()

    out = tmp_path / "scores"
    rc = cli.main(
        [
            "score",
            "--dataset",
            str(E2E / "questions.jsonl"),
            "--forecasts",
            str(agent_path),
            "--out",
            str(out),
            "--bins",
            "2",
        ]
    )
    assert rc == EXIT_OK
    stdout = capsys.readouterr().out
    # q_un declined, so 4 of 5 questions survive for every method
    assert "scored 4 questions (1 dropped by the decline rule)" in stdout

    score_part, calibration_part = (out / "report.txt").read_text().split("\n\n")
    rows = parse_table(score_part)
    assert list(rows[0]) == ["Method", "Brier", "Acc %", "Std"]
    by_method = {row["Method"]: row for row in rows}
    assert by_method["crowd"]["Brier"] == "0.105" and by_method["crowd"]["Acc %"] == "75.0"
    assert by_method["crowd"]["Std"] == ""  # no ensemble behind the crowd price
    assert by_method["agent"]["Brier"] == "0.133" and by_method["agent"]["Acc %"] == "75.0"
    cal_rows = {row["Method"]: row for row in parse_table(calibration_part)}
    assert set(cal_rows) == {"crowd", "agent"}

    scores = [json.loads(line) for line in (out / "scores.jsonl").read_text().splitlines()]
    by_label = {s["method"]: s for s in scores}
    assert abs(by_label["crowd"]["brier"] - 0.104975) < 1e-12
    assert abs(by_label["agent"]["brier"] - 0.133125) < 1e-12
    assert by_label["agent"]["n"] == by_label["crowd"]["n"] == 4
    assert by_label["crowd"]["std"] is None
    assert by_label["agent"]["std"] > 0

    calibration = [json.loads(line) for line in (out / "calibration.jsonl").read_text().splitlines()]
    assert {c["method"] for c in calibration} == {"crowd", "agent"}
    assert all(c["k"] == 2 and len(c["bins"]) == 2 for c in calibration)


def test_score_nothing_resolved_exits_2(tmp_path):
    dataset = tmp_path / "dataset.jsonl"
    write_questions(dataset, [make_question(qid="open1"), make_question(qid="open2")])
    forecasts = tmp_path / "agent.jsonl"
    forecasts.write_text("")
    rc = cli.main(["score", "--dataset", str(dataset), "--forecasts", str(forecasts)])
    assert rc == EXIT_EMPTY


# --- probe -----------------------------------------------------------------------

PROBE_REPLIES = [
    "The hosts won the final 2-1 after extra time.",  # matches "won the final" -> Leaked
    "I don't have information past my training data, so I cannot say.",  # CutoffRespected
    "Impossible to know either way.",  # Inconclusive
    "That is not something I can state with confidence.",
    "Results for that year are unavailable to me; my training data ends earlier.",
]


def record_probe_cassette(path: Path) -> None:
    from importlib import resources

    ref = resources.files("agentcast").joinpath("data/probes.jsonl")
    probes = [json.loads(line) for line in ref.read_text().splitlines() if line.strip()]
    backend = record_mode(ScriptedBackend(PROBE_REPLIES), path)
    for probe in probes:
        leakage_probe(backend, probe["question"], probe.get("answer_patterns", []))
    backend.close()


def test_probe_replay_classifies_replies(tmp_path, capsys):
    cassette = tmp_path / "probe_cassette.jsonl"
    record_probe_cassette(cassette)
    rc = cli.main(["probe", "--cassette", str(cassette)])
    assert rc == EXIT_OK
    stdout = capsys.readouterr().out
    assert "probe summary: CutoffRespected: 2, Inconclusive: 2, Leaked: 1" in stdout


def test_probe_empty_file_exits_2(tmp_path):
    probes = tmp_path / "probes.jsonl"
    probes.write_text("")
    rc = cli.main(["probe", "--probes", str(probes), "--cassette", str(tmp_path / "unused.jsonl")])
    assert rc == EXIT_EMPTY


# --- fixture drift ------------------------------------------------------------


def test_shipped_e2e_fixtures_match_their_generator(tmp_path, monkeypatch):
    # regenerate into a scratch dir and require byte identity with the
    # committed fixtures, so prompt or loop changes cannot slip past unnoticed
    import importlib.util

    spec = importlib.util.spec_from_file_location("generate_e2e", FIXTURES / "generate_e2e.py")
    generator = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(generator)
    monkeypatch.setattr(generator, "E2E", tmp_path)
    assert generator.main() == 0
    for name in ("questions.jsonl", "search.jsonl", "cassette.jsonl"):
        assert (tmp_path / name).read_bytes() == (E2E / name).read_bytes(), f"{name} drifted"
