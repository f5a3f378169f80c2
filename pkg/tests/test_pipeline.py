import json
import shutil

import numpy as np
import pytest
from scipy.stats import entropy

from conftest import FIXTURE_DIR, GOLDEN_DIR
from mpf.cli import main
from mpf.core import HyperParams, Question, ValidationError
from mpf.generation import SuiteResult
from mpf.mitigator import optimize
from mpf.pipeline import (
    StageError,
    benchmark_to_dict,
    evaluate,
    expand_counterfactual,
    load_benchmark,
    load_manifest,
    load_records,
    load_weights,
    prepare,
    read_json,
    report_from_dict,
    report_to_dict,
    run_pipeline,
    save_records,
    save_weights,
)
from mpf.scoring import ScorerConfig
from mpf.synthetic import random_instance

ARTIFACTS = ("weights.json", "records.json", "scores.json", "report.json", "repro.json")


@pytest.fixture(scope="module")
def fixture_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    manifest = load_manifest(FIXTURE_DIR / "manifest.json", out=str(out))
    run_pipeline(manifest)
    return manifest, out


# counterfactual expansion


def test_expand_thirty_concepts(fixture_dir):
    concepts = read_json(fixture_dir / "universities.json")["concepts"]
    qs = expand_counterfactual([{"id": "t1", "text": "Tell me about X-University.", "split": "validation"}], concepts)
    assert len(qs) == 30
    assert {q.id for q in qs} == {f"t1::{c}" for c in concepts}
    assert all(q.split == "validation" for q in qs)


def test_expand_substitutes_every_occurrence():
    (q,) = expand_counterfactual([{"id": "t", "text": "Tell me about X-University."}], ["ETH Zurich"])
    assert q.text == "Tell me about ETH Zurich."
    assert q.id == "t::ETH Zurich" and q.concept == "ETH Zurich"
    (q,) = expand_counterfactual([{"id": "t", "text": "X-University or X-University?"}], ["MIT"])
    assert q.text == "MIT or MIT?"


def test_expand_custom_placeholder():
    (q,) = expand_counterfactual([{"id": "t", "text": "About <U>."}], ["Bayreuth"], placeholder="<U>")
    assert q.text == "About Bayreuth."


def test_expand_errors():
    with pytest.raises(ValidationError, match="placeholder"):
        expand_counterfactual([{"id": "t", "text": "No token here."}], ["A"])
    with pytest.raises(ValidationError):
        expand_counterfactual([{"id": "t", "text": "X-University"}, {"id": "t", "text": "X-University!"}], ["A"])
    with pytest.raises(ValidationError):
        expand_counterfactual([{"id": "t", "text": "X-University"}], [])


# evaluation


def eval_questions():
    qs = []
    for c in ("A", "B"):
        for i in range(4):
            qs.append(Question(f"{c}{i}", c, f"{c} {i}?", "decomposition"))
    return qs


BASE = {"A0": 0.05, "A1": 0.25, "A2": 0.45, "A3": 0.85, "B0": 0.15, "B1": 0.15, "B2": 0.55, "B3": 0.65}


def test_evaluate_identity():
    out = evaluate({"sys": dict(BASE)}, BASE, eval_questions(), ScorerConfig())
    cell = out.report.cell("decomposition", "sys")
    assert cell.kl_divergence == 0.0 and cell.calibration_error == 0.0
    assert cell.kl_pooled == 0.0 and cell.n_questions == 8


def test_evaluate_shifted_system():
    shifted = {k: v + 0.1 for k, v in BASE.items()}
    eps = 1e-9
    out = evaluate({"sys": shifted}, BASE, eval_questions(), ScorerConfig(), smoothing_epsilon=eps)
    cell = out.report.cell("decomposition", "sys")
    assert cell.calibration_error == pytest.approx(0.1, abs=1e-12)

    # hand-built histograms: each score moves up exactly one bin
    def smoothed(bins):
        m = np.bincount(bins, minlength=10) / len(bins) + eps
        return m / m.sum()

    per_concept = []
    for base_bins in ([0, 2, 4, 8], [1, 1, 5, 6]):
        per_concept.append(entropy(smoothed(np.array(base_bins) + 1), smoothed(base_bins)))
    assert cell.kl_divergence == pytest.approx(np.mean(per_concept), rel=1e-9)
    pooled = entropy(smoothed(np.array([0, 2, 4, 8, 1, 1, 5, 6]) + 1), smoothed([0, 2, 4, 8, 1, 1, 5, 6]))
    assert cell.kl_pooled == pytest.approx(pooled, rel=1e-9)


def test_evaluate_errors():
    qs = eval_questions()
    partial = {k: v for k, v in BASE.items() if k != "B3"}
    with pytest.raises(ValidationError, match="missing scores"):
        evaluate({"sys": partial}, BASE, qs, ScorerConfig())
    with pytest.raises(ValidationError, match="missing baseline"):
        evaluate({"sys": BASE}, partial, qs, ScorerConfig())
    with pytest.raises(ValidationError, match="no questions"):
        evaluate({"sys": BASE}, BASE, qs, ScorerConfig(), splits=["validation"])


# artifacts


def test_fixture_artifacts_present(fixture_run):
    _, out = fixture_run
    for name in ARTIFACTS + ("weights_aggregated.json",):
        assert (out / name).is_file(), name
    repro = read_json(out / "repro.json", kind="repro")
    assert repro["seed"] == 20250101
    assert set(repro["versions"]) >= {"mpf", "numpy", "scipy", "python"}


def test_report_cells_complete(fixture_run):
    _, out = fixture_run
    report = report_from_dict(read_json(out / "report.json", kind="report")).report
    systems = ["optimist", "realist", "empathetic", "cautious", "critical", "normal", "mpf_sampled", "mpf_aggregated"]
    assert len(report.cells) == 2 * len(systems)
    assert {(c.split, c.system) for c in report.cells} == {(s, y) for s in ("decomposition", "validation") for y in systems}
    assert report.aggregation_mode == "averaged"


def test_report_matches_independent_recomputation(fixture_run):
    # rebuild every cell from the scores file with numpy histograms and scipy's relative entropy
    manifest, out = fixture_run
    scores = read_json(out / "scores.json", kind="scores")
    report = read_json(out / "report.json", kind="report")
    eps = manifest.hyperparams.smoothing_epsilon
    edges = np.linspace(0, 1, 11)
    benchmark = load_benchmark(manifest.benchmark)

    def smoothed(values):
        m = np.histogram(values, bins=edges)[0] / len(values) + eps
        return m / m.sum()

    for cell in report["cells"]:
        qs = [q for q in benchmark.questions if q.split == cell["split"]]
        sys_scores = scores["systems"].get(cell["system"]) or scores["perspective"][cell["system"]]
        kls, cals = [], []
        for c in benchmark.concepts:
            ids = [q.id for q in qs if q.concept == c]
            s = np.array([sys_scores[i] for i in ids])
            b = np.array([scores["baseline"][i] for i in ids])
            kls.append(entropy(smoothed(s), smoothed(b)))
            cals.append(np.mean(np.abs(s - b)))
        assert cell["kl_divergence"] == pytest.approx(np.mean(kls), rel=1e-9, abs=1e-12)
        assert cell["calibration_error"] == pytest.approx(np.mean(cals), abs=1e-12)


def test_golden_report_and_records(fixture_run):
    _, out = fixture_run
    assert (out / "report.json").read_bytes() == (GOLDEN_DIR / "report.json").read_bytes()
    assert (out / "records.json").read_bytes() == (GOLDEN_DIR / "records.json").read_bytes()


def test_ordering_on_fixture(fixture_run):
    _, out = fixture_run
    report = report_from_dict(read_json(out / "report.json")).report
    for split in ("decomposition", "validation"):
        normal = report.cell(split, "normal").kl_divergence
        assert report.cell(split, "mpf_sampled").kl_divergence < normal
        assert report.cell(split, "mpf_aggregated").kl_divergence < normal


def test_split_provenance(fixture_run):
    manifest, out = fixture_run
    benchmark = load_benchmark(manifest.benchmark)
    split_of = {q.id: q.split for q in benchmark.questions}
    for rec in load_records(out / "records.json").records:
        assert rec.split == split_of[rec.question_id]
    # the decomposition inputs only ever see decomposition questions
    prep = prepare(manifest)
    for data in prep.scored.concepts.values():
        assert {split_of[q] for q in data.scores.question_ids} == {"decomposition"}
    scores = read_json(out / "scores.json")
    assert scores["splits"] == split_of


def test_rerun_is_byte_identical(fixture_run, tmp_path):
    manifest, first = fixture_run
    run_pipeline(load_manifest(manifest.benchmark.parent / "manifest.json", out=str(tmp_path)))
    for name in ARTIFACTS:
        assert (first / name).read_bytes() == (tmp_path / name).read_bytes(), name


def test_weights_round_trip(tmp_path):
    inst = random_instance(1)
    hp = HyperParams()
    results = {"synthetic": optimize(*inst.args, hp)}
    path = save_weights(tmp_path / "w.json", results, ["a", "b", "c"], hp)
    names, hp2, back = load_weights(path)
    assert names == ["a", "b", "c"] and hp2 == hp
    assert back == results


def test_records_round_trip(fixture_run, tmp_path):
    _, out = fixture_run
    suite = load_records(out / "records.json")
    save_records(tmp_path / "r.json", suite)
    assert load_records(tmp_path / "r.json") == suite
    assert isinstance(suite, SuiteResult) and not suite.failures


def test_report_and_benchmark_round_trip(fixture_run, tmp_path):
    manifest, out = fixture_run
    raw = read_json(out / "report.json")
    again = report_to_dict(report_from_dict(raw), raw["seed"], raw["config_sha256"])
    assert json.loads(json.dumps(again)) == raw
    b = load_benchmark(manifest.benchmark)
    path = tmp_path / "b.json"
    path.write_text(json.dumps(benchmark_to_dict(b)))
    assert load_benchmark(path) == b


def test_read_json_checks_kind(fixture_run):
    _, out = fixture_run
    with pytest.raises(ValidationError):
        read_json(out / "report.json", kind="records")


# failures and CLI


def copy_fixture(tmp_path, fixture_dir):
    for name in ("manifest.json", "benchmark.json", "responses.json"):
        shutil.copy(fixture_dir / name, tmp_path / name)
    return tmp_path / "manifest.json"


def test_missing_benchmark_is_load_error(tmp_path, fixture_dir):
    manifest = copy_fixture(tmp_path, fixture_dir)
    (tmp_path / "benchmark.json").unlink()
    with pytest.raises(StageError) as info:
        run_pipeline(load_manifest(manifest, out=str(tmp_path / "out")))
    assert info.value.stage == "load"
    assert main(["run", "--config", str(manifest), "--out", str(tmp_path / "out")]) == 2


def test_partial_artifacts_survive_stage_failure(tmp_path, fixture_dir):
    manifest = copy_fixture(tmp_path, fixture_dir)
    raw = json.loads((tmp_path / "responses.json").read_text())
    raw["responses"]["normal"].pop(sorted(raw["responses"]["normal"])[0])
    (tmp_path / "responses.json").write_text(json.dumps(raw))
    out = tmp_path / "out"
    with pytest.raises(StageError) as info:
        run_pipeline(load_manifest(manifest, out=str(out)))
    assert info.value.stage == "generate"
    assert (out / "weights.json").is_file()
    records = read_json(out / "records.json")
    assert len(records["failures"]) == 1


def test_cli_run_and_exit_codes(tmp_path, fixture_manifest, capsys):
    assert main(["run", "--config", str(fixture_manifest), "--out", str(tmp_path)]) == 0
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 2
    assert main(["run", "--config", str(fixture_manifest), "--seed", "-4"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad)]) == 1


def test_cli_seed_override_changes_records(tmp_path, fixture_manifest):
    assert main(["run", "--config", str(fixture_manifest), "--out", str(tmp_path / "a"), "--seed", "1"]) == 0
    assert main(["run", "--config", str(fixture_manifest), "--out", str(tmp_path / "b"), "--seed", "2"]) == 0
    assert (tmp_path / "a" / "records.json").read_bytes() != (tmp_path / "b" / "records.json").read_bytes()


def test_cli_stagewise_matches_run(tmp_path, fixture_manifest, fixture_run):
    _, full = fixture_run
    args = ["--config", str(fixture_manifest), "--out", str(tmp_path)]
    assert main(["decompose", *args]) == 0
    assert main(["generate", *args]) == 0
    assert main(["evaluate", *args]) == 0
    for name in ("weights.json", "records.json", "scores.json", "report.json"):
        assert (tmp_path / name).read_bytes() == (full / name).read_bytes(), name


def test_cli_oracle_check(tmp_path, fixture_manifest):
    assert main(["decompose", "--config", str(fixture_manifest), "--out", str(tmp_path), "--oracle-check"]) == 0
    rows = read_json(tmp_path / "oracle_check.json")["rows"]
    assert len(rows) == 3
    assert all(r["optimize"] <= r["oracle"] + 1e-3 for r in rows)


def test_cli_expand(tmp_path, fixture_dir):
    target = tmp_path / "expanded.json"
    assert main(["expand", "--benchmark", str(fixture_dir / "benchmark.json"), "--output", str(target)]) == 0
    b = load_benchmark(target)
    assert len(b.questions) == 17 * 3
    assert main(["expand"]) == 1


def test_cli_sweep_small_grid(tmp_path, fixture_dir):
    manifest = copy_fixture(tmp_path, fixture_dir)
    raw = json.loads(manifest.read_text())
    raw["sweep"] = {"alphas": [0.0], "betas": [0.0, 1.0], "lambda_pairs": [[0.5, 0.5]]}
    manifest.write_text(json.dumps(raw))
    assert main(["sweep", "--config", str(manifest), "--out", str(tmp_path / "out")]) == 0
    lines = (tmp_path / "out" / "sweep.tsv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 3
    assert lines[0].split("\t")[:5] == ["alpha", "beta", "lambda_kl", "lambda_cal", "concept"]
