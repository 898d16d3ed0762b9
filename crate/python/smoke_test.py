"""Exercise the taskseq extension end to end on a small corpus."""

import json
import sys
import tempfile
from pathlib import Path

import taskseq


def check(cond, what):
    if not cond:
        print(f"FAIL {what}")
        sys.exit(1)
    print(f"ok   {what}")


def main():
    corpus = taskseq.generate_corpus(seed=0, n_scenarios=30)
    check(len(corpus) == 30, "generate_corpus returns 30 examples")
    again = taskseq.generate_corpus(seed=0, n_scenarios=30)
    check([e.steps for e in corpus] == [e.steps for e in again], "generation is deterministic")

    ex = corpus[0]
    states = ex.replay()
    check(len(states) == len(ex) + 1, "replay yields one state per step plus the start")
    check(states[-1].goal_satisfied(ex.task), "demonstration reaches its goal")

    state = ex.initial_state
    check(taskseq.WorldState.from_json(state.to_json()) == state, "state JSON round-trips")
    first = ex.steps[0]
    check(state.check(first) is None and first in state.executable_actions(), "first step is executable")
    check(state.apply(first).step_index == state.step_index + 1, "apply advances the step index")
    bogus = taskseq.Action("GRASP", max(state.object_ids()) + 100)
    check(state.check(bogus) == "UNKNOWN_OBJECT", "unknown objects are rejected")
    try:
        state.apply(bogus)
        check(False, "apply raises on rejection")
    except ValueError:
        check(True, "apply raises on rejection")
    try:
        taskseq.Action("FOLLOW_TRAJ_POUR", 1)
        check(False, "arity is validated")
    except ValueError:
        check(True, "arity is validated")

    model, report = taskseq.Model.train(corpus, C=100.0)
    check(report["converged"] and report["final_violation"] <= 0.01, "training converges")
    check(len(model.weights) == taskseq.FEATURE_DIM == 941, "weight vector has 941 entries")

    top = model.top_k(state, ex.task, k=3)
    best, score = model.predict(state, ex.task)
    check(top[0] == (best, score), "predict is the head of top_k")
    blocks = model.block_scores(state, ex.task, best)
    check(abs(sum(s for _, s in blocks) - score) < 1e-9 * max(1.0, abs(score)), "block scores sum to the score")
    check(abs(model.score(state, ex.task, best) - score) < 1e-12, "score agrees with predict")

    actions, final, status = model.rollout(state, ex.task)
    moves = [a for a in actions if a != taskseq.Action.done()]
    check(status in ("DONE", "MAX_STEPS") and final.step_index == len(moves), "rollout returns a consistent trace")

    plain = taskseq.feedback_eval(corpus, model, k=1)
    helped = taskseq.feedback_eval(corpus, model, k=3)
    check(0.0 <= plain <= helped <= 100.0, f"oracle feedback does not hurt ({plain:.1f} -> {helped:.1f})")

    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "model.json"
        model.save(str(path))
        loaded = taskseq.Model.load(str(path))
        check(loaded.weights == model.weights, "model save/load is exact")
        cpath = Path(d) / "corpus.jsonl"
        taskseq.save_corpus(corpus, str(cpath))
        check([e.scenario_id for e in taskseq.load_corpus(str(cpath))] == [e.scenario_id for e in corpus], "corpus save/load")

    cv = taskseq.cross_validate(corpus, folds=3, C=100.0)
    full = cv["full"]["macro_average"][0]
    chance = cv["chance"]["macro_average"][0]
    check(full > chance, f"cross-validated model beats chance ({full:.1f} vs {chance:.1f})")
    json.dumps(cv)

    suite = taskseq.chain(model, seed=0, k=3)
    check(len(suite) == 12 and all("success" in r for r in suite), "recipe suite runs")
    print("all checks passed")


if __name__ == "__main__":
    main()
