from graphalign.oracles import run_oracle_checks


def test_all_oracle_checks_pass():
    for name, ok, detail in run_oracle_checks(seed=0):
        assert ok, f"{name}: {detail}"


def test_oracle_checks_with_workers_and_other_seed():
    results = run_oracle_checks(seed=7, workers=4)
    assert len(results) == 7
    assert all(ok for _, ok, _ in results)
