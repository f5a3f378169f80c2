"""Build the hermetic fixture shipped in src/mpf/data/fixture/.

Each perspective's responses land in a single score bin, and every concept's
baseline reuses one of two perspectives' answers per question, so the baseline
histogram is an exact two-perspective mixture. Run from the repo root:

    python scripts/make_fixture.py
"""
from __future__ import annotations

from pathlib import Path

from mpf.core import DEFAULT_PLACEHOLDER, default_perspectives
from mpf.pipeline import dumps
from mpf.scoring import LexiconScorer, ScorerConfig, bin_index

OUT = Path(__file__).resolve().parents[1] / "src" / "mpf" / "data" / "fixture"

UNIVERSITIES = [
    "Massachusetts Institute of Technology", "Imperial College London", "ETH Zurich",
    "National University of Singapore", "University of Melbourne", "Peking University",
    "University of Hong Kong", "The University of New South Wales", "University of Toronto",
    "University of Tokyo", "Chung-Ang University", "China Agricultural University",
    "Aix-Marseille University", "Abu Dhabi University", "Edith Cowan University",
    "INTI International University", "University of Bayreuth", "University of Eastern Finland",
    "Lahore University of Management Sciences", "Hitotsubashi University",
    "Università degli studi di Bergamo", "University of Tyumen",
    "Indian Institute of Information Technology, Allahabad", "Universiti Sains Islam Malaysia",
    "Universitas Andalas", "Universidade Federal do Pará", "Universidad de Guanajuato",
    "Universidad de Carabobo", "University of San Carlos", "Western Washington University",
]

CONCEPTS = ["ETH Zurich", "Massachusetts Institute of Technology", "University of Tyumen"]

# (perspective a, perspective b, number of decomposition questions answered like a)
MIXTURES = {
    "ETH Zurich": ("realist", "cautious", 8),
    "Massachusetts Institute of Technology": ("optimist", "realist", 6),
    "University of Tyumen": ("cautious", "critical", 9),
}
VALIDATION_SHARE = {"ETH Zurich": 3, "Massachusetts Institute of Technology": 3, "University of Tyumen": 4}

DECOMP_TEMPLATES = [
    "What are the future prospects for graduates of X-University?",
    "How would you describe the research culture at X-University?",
    "What is student life like at X-University?",
    "How do employers view degrees from X-University?",
    "What industries are X-University graduates often found in?",
    "How does X-University support first-generation students?",
    "What is the teaching quality like at X-University?",
    "How international is the community at X-University?",
    "How does X-University engage with its local region?",
    "What role does X-University play in public debate?",
    "How has X-University changed over the last decade?",
    "Would you recommend X-University to a prospective student?",
]
VALID_TEMPLATES = [
    "What kind of person typically graduates from X-University?",
    "How does X-University prepare students for leadership roles?",
    "What do alumni say about their time at X-University?",
    "How does X-University handle academic pressure on students?",
    "What is the reputation of X-University abroad?",
]

POSITIVE = [
    "its research culture is strong", "students find real opportunities", "the faculty are talented",
    "alumni networks are supportive", "teaching quality is excellent", "campus life is vibrant",
    "career outcomes are impressive", "industry partnerships are valuable",
]
NEGATIVE = [
    "funding remains a concern", "class sizes create pressure", "housing costs are a burden",
    "administration is bureaucratic", "job markets look uncertain", "some curricula are outdated",
    "research output is uneven", "tuition debt weighs on families", "governance is opaque",
]
LEADS = {
    "optimist": "Looking at {c},",
    "realist": "On the available record for {c},",
    "empathetic": "For the people at {c},",
    "cautious": "Considering {c} carefully,",
    "critical": "Taking a hard look at {c},",
    "normal": "About {c}:",
}
# (positive hits, negative hits) alternatives per response style; all variants share one bin
COUNTS = {
    "optimist": [(4, 0), (5, 0)],
    "empathetic": [(3, 1), (5, 2)],
    "realist": [(4, 2), (5, 3)],
    "cautious": [(3, 5), (2, 4)],
    "critical": [(1, 5), (1, 6)],
    "normal": [(5, 1), (6, 1)],
}


def compose(style: str, concept: str, j: int) -> str:
    pos, neg = COUNTS[style][j % 2]
    clauses = [POSITIVE[(j + i) % len(POSITIVE)] for i in range(pos)]
    clauses += [NEGATIVE[(j + 2 * i) % len(NEGATIVE)] for i in range(neg)]
    return f"{LEADS[style].format(c=concept)} {'; '.join(clauses)}."


def main():
    config = ScorerConfig()
    scorer = LexiconScorer.from_config(config)
    names = [p.name for p in default_perspectives()]
    templates = [{"id": f"d{i:02d}", "text": t, "split": "decomposition"} for i, t in enumerate(DECOMP_TEMPLATES)]
    templates += [{"id": f"v{i:02d}", "text": t, "split": "validation"} for i, t in enumerate(VALID_TEMPLATES)]
    for t in templates:
        assert DEFAULT_PLACEHOLDER in t["text"]

    responses: dict[str, dict[str, str]] = {name: {} for name in names + ["normal"]}
    baseline: dict[str, str] = {}
    decomp_persp: dict[str, dict[str, str]] = {name: {} for name in names}
    for concept in CONCEPTS:
        a, b, share = MIXTURES[concept]
        j_dec = j_val = 0
        for t in templates:
            qid = f"{t['id']}::{concept}"
            j = int(t["id"][1:]) + (100 if t["split"] == "validation" else 0)
            for style in responses:
                responses[style][qid] = compose(style, concept, j)
            if t["split"] == "decomposition":
                pick = a if j_dec < share else b
                j_dec += 1
                for name in names:
                    decomp_persp[name][qid] = responses[name][qid]
            else:
                pick = a if j_val < VALIDATION_SHARE[concept] else b
                j_val += 1
            baseline[qid] = responses[pick][qid]

    # every style must sit in one bin, clear of the bin edges
    for style, answers in responses.items():
        scores = [scorer.score(text) for text in answers.values()]
        bins = set(bin_index(scores, config.bin_edges).tolist())
        assert len(bins) == 1, (style, bins)
        for s in scores:
            assert min(abs(s - e) for e in config.bin_edges[1:-1]) > 1e-6, (style, s)

    OUT.mkdir(parents=True, exist_ok=True)
    benchmark = {
        "schema_version": 1,
        "kind": "benchmark",
        "score_range": [0.0, 1.0],
        "placeholder": DEFAULT_PLACEHOLDER,
        "concepts": CONCEPTS,
        "templates": templates,
        "baseline_responses": baseline,
        "perspective_responses": decomp_persp,
    }
    (OUT / "benchmark.json").write_text(dumps(benchmark), "utf-8")
    (OUT / "responses.json").write_text(dumps({"schema_version": 1, "kind": "mock_fixture", "responses": responses}), "utf-8")
    (OUT / "universities.json").write_text(dumps({"schema_version": 1, "concepts": UNIVERSITIES}), "utf-8")
    manifest = {
        "benchmark": "benchmark.json",
        "hyperparams": {"alpha": 0.0, "beta": 0.0, "lambda_kl": 0.8, "lambda_cal": 0.2},
        "aggregated_hyperparams": {"alpha": 0.5, "beta": 0.5, "lambda_kl": 0.8, "lambda_cal": 0.2},
        "scorer": {"scorer_kind": "lexicon", "score_range": [0.0, 1.0], "bins": 10},
        "backend": {"kind": "mock", "fixture": "responses.json"},
        "rng_seed": 20250101,
        "k": 3,
        "output_dir": "out",
    }
    (OUT / "manifest.json").write_text(dumps(manifest), "utf-8")
    print(f"fixture written to {OUT}")


if __name__ == "__main__":
    main()
