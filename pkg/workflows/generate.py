"""Regenerate the example application and resource files in this directory.

    python3 workflows/generate.py
"""

from __future__ import annotations

import json
from pathlib import Path

HERE = Path(__file__).resolve().parent


def shape(name, n_p, n_s, n_t, executable="sleep", arguments=("2",), duration=2.0, staging=False):
    def task(p, s, t):
        doc = {"executable": executable, "arguments": list(arguments), "cores": 1,
               "expected_duration": duration}
        if staging:
            doc["input_staging"] = [{"source": "input.dat", "destination": "input.dat"}]
            doc["output_staging"] = [{"source": "output.dat", "destination": f"out/{name}.{p}.{s}.{t}.dat"}]
        return doc

    return {"name": name, "pipelines": [
        {"stages": [{"tasks": [task(p, s, t) for t in range(n_t)]} for s in range(n_s)]}
        for p in range(n_p)
    ]}


def adaptive(iterations=5, tolerance=0.2):
    """One pipeline of simulate/check stage pairs; a check that converges cancels what is left."""
    stages = []
    for i in range(1, iterations + 1):
        later = [f"iter{j}.{part}" for j in range(i + 1, iterations + 1) for part in ("sim", "check")]
        stages.append({"uid": f"iter{i}.sim", "tasks": [
            {"uid": f"iter{i}.sim.{k}", "executable": "sleep", "arguments": ["0.2"], "expected_duration": 0.2}
            for k in range(4)
        ]})
        stages.append({"uid": f"iter{i}.check", "tasks": [{
            "uid": f"iter{i}.check.0",
            "executable": "python3",
            "arguments": ["converge.py", str(i), str(tolerance), *later],
            "input_staging": [{"source": "converge.py", "destination": "converge.py"}],
            "output_staging": [{"source": "decision.json", "destination": f"out/decision-iter{i}.json"}],
            "is_branch_point": True,
        }]})
    return {"name": "adaptive", "pipelines": [{"uid": "adaptive.loop", "stages": stages}]}


def write(path: Path, doc, compact: bool = False) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(doc, separators=(",", ":")) if compact else json.dumps(doc, indent=1)
    path.write_text(text + "\n")


def main() -> None:
    # application-level experiments, durations scaled down to desk size
    write(HERE / "exp1_sleep.json", shape("exp1_sleep", 1, 1, 16))
    write(HERE / "exp1_script.json", shape("exp1_script", 1, 1, 16, "sh", ["-c", ":"], duration=None))
    for d in (1, 5, 10):
        write(HERE / f"exp2_sleep{d}.json", shape(f"exp2_sleep{d}", 1, 1, 16, arguments=[str(d)], duration=d))
    write(HERE / "exp3_sleep10.json", shape("exp3_sleep10", 1, 1, 16, arguments=["10"], duration=10.0))
    write(HERE / "exp4_16pipelines.json", shape("exp4_16pipelines", 16, 1, 1))
    write(HERE / "exp4_16stages.json", shape("exp4_16stages", 1, 16, 1))
    write(HERE / "exp4_16tasks.json", shape("exp4_16tasks", 1, 1, 16))

    # scaling suites, meant for the simulated backend (600 s tasks in virtual time)
    for n in (64, 128, 256, 512, 1024, 2048, 4096):
        write(HERE / "scaling" / f"weak_{n}.json",
              shape(f"weak_{n}", 1, 1, n, arguments=["600"], duration=600.0, staging=True), compact=True)
    write(HERE / "scaling" / "strong_8192.json", shape("strong_8192", 1, 1, 8192, arguments=["600"], duration=600.0), compact=True)

    write(HERE / "adaptive" / "adaptive.json", adaptive())

    res = HERE / "resources"
    write(res / "local_16.json", {"backend": "local", "cores": 16, "walltime": 30})
    for c in (1024, 2048, 4096):
        write(res / f"sim_strong_{c}.json", {"backend": "sim", "cores": c, "walltime": 120})
    # 11/1024 s per copy: 512 tasks x 2 copies take 11 s, 4096 tasks take 88 s
    write(res / "sim_weak.json", {"backend": "sim", "cores": 4096, "walltime": 120,
                                  "sim": {"staging_op_cost": 11 / 1024}})
    write(res / "sim_failures.json", {"backend": "sim", "cores": 128, "walltime": 120,
                                      "failure": {"failure_rate": 0.5, "seed": 0},
                                      "retries": {"task": None}})
    write(res / "sim_hang.json", {"backend": "sim", "cores": 32, "walltime": 120,
                                  "failure": {"hang_after": 10, "seed": 1},
                                  "retries": {"rts": 1}, "heartbeat": {"interval": 0.05}})


if __name__ == "__main__":
    main()
