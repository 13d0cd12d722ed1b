"""Verification scripts, execution environments, and offline check extraction.

A script is a read-only diagnostic command bound to a taxonomy node. The
simulated environment answers known commands from a fault-conditional canned
table so whole diagnosis runs are deterministic and desk-scale; the real
adapter executes argv directly with no shell interpretation.

Outcome semantics are deliberately raw here: Pass means the check looks
healthy, Fail means the check tripped. Whether a tripped check confirms a
fault hypothesis is the engine's call, not this module's.
"""
from __future__ import annotations

import json
import re
import subprocess
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

from .agents import extract_checks
from .taxonomy import Taxonomy, TaxonomyPath, as_path
from .util import short_digest

STDOUT_CAP_BYTES = 64 * 1024

# Read-only diagnostics only; anything else needs explicit operator opt-in.
COMMAND_ALLOWLIST = frozenset(
    {
        "nvidia-smi",
        "nvlink",
        "bandwidth-test",
        "gemm-check",
        "cuda-sample",
        "driver-check",
        "dmesg-check",
        "sysconfig-check",
        "nccl-allreduce",
        "nic-check",
        "rdma-perftest",
        "train-smoke",
        "framework-stress",
        "ckpt-load",
        "version-check",
        "ecc-check",
        "retired-pages-check",
        "xid-scan",
        "inforom-check",
        "faultprobe",
        "support-note",
        "sleep",
        "echo",
        "true",
        "false",
    }
)


class Outcome(str, Enum):
    PASS = "pass"
    FAIL = "fail"
    TIMEOUT = "timeout"
    EXEC_ERROR = "exec_error"
    # Node-level only: nothing to run, or runs degraded without tripping.
    INCONCLUSIVE = "inconclusive"


class RuleKind(str, Enum):
    EXIT_ZERO = "exit_zero"
    STDOUT_REGEX = "stdout_regex"
    EXIT_ZERO_AND_REGEX = "exit_zero_and_regex"


@dataclass(frozen=True)
class SuccessRule:
    kind: RuleKind = RuleKind.EXIT_ZERO
    pattern: str | None = None

    def __post_init__(self):
        if self.kind is not RuleKind.EXIT_ZERO and not self.pattern:
            raise ValueError(f"rule {self.kind.value} requires a pattern")

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "pattern": self.pattern}

    @classmethod
    def from_json(cls, raw: dict) -> "SuccessRule":
        return cls(kind=RuleKind(raw["kind"]), pattern=raw.get("pattern"))


def compute_outcome(exit_code: int, stdout: str, rule: SuccessRule) -> Outcome:
    """Pass/Fail as a pure function of exit code, stdout, and rule."""
    exit_ok = exit_code == 0
    regex_ok = bool(re.search(rule.pattern, stdout)) if rule.pattern else True
    if rule.kind is RuleKind.EXIT_ZERO:
        ok = exit_ok
    elif rule.kind is RuleKind.STDOUT_REGEX:
        ok = regex_ok
    else:
        ok = exit_ok and regex_ok
    return Outcome.PASS if ok else Outcome.FAIL


@dataclass
class VerificationScript:
    id: str
    bound_path: TaxonomyPath
    level: str  # "leaf" | "internal"
    command: list[str]
    timeout: float = 30.0
    success_rule: SuccessRule = field(default_factory=SuccessRule)

    def __post_init__(self):
        if self.level not in ("leaf", "internal"):
            raise ValueError(f"bad level {self.level!r}")
        if self.level == "leaf" and self.bound_path.depth != 3:
            raise ValueError(f"leaf script {self.id} must bind a depth-3 path")
        if self.level == "internal" and self.bound_path.depth not in (1, 2):
            raise ValueError(f"internal script {self.id} must bind a depth-1/2 path")
        if not self.command:
            raise ValueError("command must be non-empty argv")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "bound_path": str(self.bound_path),
            "level": self.level,
            "command": list(self.command),
            "timeout": self.timeout,
            "success_rule": self.success_rule.to_json(),
        }

    @classmethod
    def from_json(cls, raw: dict) -> "VerificationScript":
        return cls(
            id=raw["id"],
            bound_path=as_path(raw["bound_path"]),
            level=raw["level"],
            command=list(raw["command"]),
            timeout=float(raw.get("timeout", 30.0)),
            success_rule=SuccessRule.from_json(raw["success_rule"]),
        )


@dataclass
class VerificationResult:
    script_id: str
    exit_code: int | None
    stdout: str
    stderr: str
    duration_seconds: float
    outcome: Outcome

    def digest(self) -> str:
        return short_digest(
            {
                "script_id": self.script_id,
                "exit_code": self.exit_code,
                "stdout": self.stdout,
                "outcome": self.outcome.value,
            }
        )

    def to_json(self) -> dict:
        return {
            "script_id": self.script_id,
            "exit_code": self.exit_code,
            "stdout": self.stdout,
            "stderr": self.stderr,
            "duration_seconds": self.duration_seconds,
            "outcome": self.outcome.value,
        }


class ScriptRegistry:
    def __init__(self, scripts: Iterable[VerificationScript] = ()):
        self._scripts: dict[str, VerificationScript] = {}
        for script in scripts:
            self.add(script)

    def add(self, script: VerificationScript):
        self._scripts[script.id] = script

    def get(self, script_id: str) -> VerificationScript | None:
        return self._scripts.get(script_id)

    def __len__(self) -> int:
        return len(self._scripts)

    def scripts(self) -> list[VerificationScript]:
        return list(self._scripts.values())

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptRegistry":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(VerificationScript.from_json(item) for item in raw)

    def save_file(self, path: str | Path):
        doc = [s.to_json() for s in self._scripts.values()]
        Path(path).write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# environments

@dataclass
class ExecResult:
    exit_code: int | None
    stdout: str
    stderr: str
    duration_seconds: float
    timed_out: bool = False
    failed_to_start: bool = False


class CommandNotFound(RuntimeError):
    pass


def _canned(exit_code: int, stdout: str) -> tuple[int, str]:
    return exit_code, stdout


# fault tag -> canned reaction, per simulated command. Durations are the
# simulated wall time the check would take on a node (used for the session's
# verification-time ledger; the simulator never actually sleeps).
_SIM_TABLE: dict[str, dict] = {
    "nvidia-smi": {
        "duration": 2.0,
        "healthy": _canned(0, "8 GPUs present\nECC volatile uncorrectable: 0\nconfiguration ok"),
        "faults": {
            "ecc_uncorrectable": _canned(1, "ECC volatile uncorrectable: 2 on GPU1\nuncorrectable ECC error encountered"),
            "gpu_missing": _canned(1, "GPU count mismatch: expected 8, found 7"),
        },
    },
    "nvlink": {
        "duration": 3.0,
        "healthy": _canned(0, "All NVLink links active at 25.781 GB/s"),
        "faults": {"nvlink_inactive": _canned(1, "All links to GPU1 are inactive")},
    },
    "bandwidth-test": {
        "duration": 45.0,
        "healthy": _canned(0, "host-to-device 24.1 GB/s, device-to-host 23.8 GB/s"),
        "faults": {"pcie_degraded": _canned(1, "host-to-device 3.1 GB/s below expected 20 GB/s")},
    },
    "gemm-check": {
        "duration": 30.0,
        "healthy": _canned(0, "GEMM sweep completed, residuals within tolerance"),
        "faults": {
            "ecc_uncorrectable": _canned(1, "CUBLAS_STATUS_EXECUTION_FAILED during cublasGemmEx"),
            "xid_48": _canned(1, "GEMM aborted; device fell off the bus after Xid event"),
        },
    },
    "cuda-sample": {
        "duration": 5.0,
        "healthy": _canned(0, "vectorAdd PASSED"),
        "faults": {
            "illegal_mem_access": _canned(1, "an illegal memory access was encountered"),
        },
    },
    "driver-check": {
        "duration": 1.5,
        "healthy": _canned(0, "driver and userspace libraries match"),
        "faults": {"driver_mismatch": _canned(1, "Failed to initialize NVML: Driver/library version mismatch")},
    },
    "dmesg-check": {
        "duration": 1.0,
        "healthy": _canned(0, "no GPU-related kernel messages"),
        "faults": {
            "kernel_panic": _canned(1, "kernel: Oops: nvidia module fault"),
        },
    },
    "sysconfig-check": {
        "duration": 2.5,
        "healthy": _canned(0, "hugepages, ulimits and cgroups within expected ranges"),
        "faults": {"os_misconfig": _canned(1, "ulimit memlock too low for RDMA registration")},
    },
    "nccl-allreduce": {
        "duration": 60.0,
        "healthy": _canned(0, "allreduce 8 ranks: 182.4 GB/s bus bandwidth"),
        "faults": {
            "nccl_socket_refused": _canned(1, "NCCL WARN Connect to peer failed : Connection refused"),
            "nvlink_inactive": _canned(1, "NCCL WARN transport failure: NVLink links to GPU1 inactive, allreduce aborted"),
            "ib_hca_misconfig": _canned(1, 'NCCL WARN NET/IB : Unable to open device mlx5_1'),
        },
    },
    "nic-check": {
        "duration": 2.0,
        "healthy": _canned(0, "8 IB HCAs active; control-plane NIC excluded from NCCL_IB_HCA"),
        "faults": {"ib_hca_misconfig": _canned(1, "NCCL_IB_HCA selects control-plane device mlx5_1")},
    },
    "rdma-perftest": {
        "duration": 40.0,
        "healthy": _canned(0, "ib_write_bw 391 Gb/s across all rails"),
        "faults": {"ib_link_flap": _canned(1, "rail 3 bandwidth collapsed; link flap counters increasing")},
    },
    "train-smoke": {
        "duration": 120.0,
        "healthy": _canned(0, "2-step smoke training converged on synthetic batch"),
        "faults": {
            "user_code_bug": _canned(1, "smoke run crashed in user collate_fn: IndexError"),
            "user_misconfig": _canned(1, "smoke run aborted: CUDA_VISIBLE_DEVICES selects absent device"),
            "framework_bug": _canned(1, "smoke run hit framework assertion in autograd engine"),
        },
    },
    "framework-stress": {
        "duration": 90.0,
        "healthy": _canned(0, "stress suite green across dtype matrix"),
        "faults": {"framework_bug": _canned(1, "stress suite segfault in fused optimizer kernel")},
    },
    "ckpt-load": {
        "duration": 20.0,
        "healthy": _canned(0, "checkpoint loads and round-trips"),
        "faults": {"ckpt_corrupt": _canned(1, "checkpoint deserialization failed: truncated tensor storage")},
    },
    "version-check": {
        "duration": 1.0,
        "healthy": _canned(0, "container/runtime/driver versions within supported matrix"),
        "faults": {
            "cuda_version_mismatch": _canned(1, "CUDA driver version is insufficient for CUDA runtime version: container CUDA 12.4 vs host VM driver for 12.1"),
        },
    },
    "ecc-check": {
        "duration": 4.0,
        "healthy": _canned(0, "volatile DBE count 0 across all GPUs"),
        "faults": {"ecc_uncorrectable": _canned(1, "volatile DBE count 2 on GPU1; uncorrectable ECC error encountered")},
    },
    "retired-pages-check": {
        "duration": 3.0,
        "healthy": _canned(0, "no pending page retirements"),
        "faults": {
            "ecc_uncorrectable": _canned(1, "pending page retirements: 2 (double-bit origin)"),
            "page_retirement": _canned(1, "pending page retirements: 1, blacklisted rows present"),
        },
    },
    "xid-scan": {
        "duration": 1.0,
        "healthy": _canned(0, "no Xid events in kernel log"),
        "faults": {"xid_48": _canned(1, "found NVRM Xid 48 (double-bit ECC) in kernel log")},
    },
    "inforom-check": {
        "duration": 2.0,
        "healthy": _canned(0, "infoROM image valid"),
        "faults": {"inforom_corrupt": _canned(1, "WARNING: infoROM is corrupted on GPU3")},
    },
    "support-note": {
        "duration": 0.5,
        "healthy": _canned(0, "support bundle collected for escalation"),
        "faults": {},
    },
}


class SimulatedEnvironment:
    """Deterministic stand-in for a GPU node: same faults + command, same bytes.

    Scenario files look like ``{"faults": ["tag"], "overrides":
    [{"argv_prefix": [...], "exit": 0, "stdout": "...", "duration": 1.0}]}``.
    Overrides win over the builtin table and are matched by argv prefix.
    """

    def __init__(self, faults: Iterable[str] = (), overrides: list[dict] | None = None):
        self.faults = frozenset(faults)
        self.overrides = list(overrides or [])

    @classmethod
    def from_scenario(cls, doc: dict) -> "SimulatedEnvironment":
        return cls(faults=doc.get("faults", []), overrides=doc.get("overrides"))

    @classmethod
    def from_file(cls, path: str | Path) -> "SimulatedEnvironment":
        return cls.from_scenario(json.loads(Path(path).read_text(encoding="utf-8")))

    def execute(self, argv: list[str], timeout: float) -> ExecResult:
        for override in self.overrides:
            prefix = list(override["argv_prefix"])
            if argv[: len(prefix)] == prefix:
                duration = float(override.get("duration", 1.0))
                if duration > timeout:
                    return ExecResult(None, "", "", timeout, timed_out=True)
                return ExecResult(
                    int(override.get("exit", 0)), override.get("stdout", ""), "", duration
                )

        name = argv[0]
        if name == "sleep":
            wanted = float(argv[1]) if len(argv) > 1 else 1.0
            if wanted > timeout:
                return ExecResult(None, "", "", timeout, timed_out=True)
            return ExecResult(0, "", "", wanted)
        if name == "faultprobe":
            tag = argv[1] if len(argv) > 1 else ""
            if 1.0 > timeout:
                return ExecResult(None, "", "", timeout, timed_out=True)
            if tag in self.faults:
                return ExecResult(1, f"FAULT DETECTED: {tag} active", "", 1.0)
            return ExecResult(0, f"OK: {tag} clear", "", 1.0)
        if name == "echo":
            return ExecResult(0, " ".join(argv[1:]), "", 0.1)

        entry = _SIM_TABLE.get(name)
        if entry is None:
            raise CommandNotFound(f"simulated environment knows no command {name!r}")
        duration = entry["duration"]
        if duration > timeout:
            return ExecResult(None, "", "", timeout, timed_out=True)
        for tag in sorted(entry["faults"]):
            if tag in self.faults:
                code, out = entry["faults"][tag]
                return ExecResult(code, out, "", duration)
        code, out = entry["healthy"]
        return ExecResult(code, out, "", duration)


class RealEnvironment:
    """Executes argv directly on the host, no shell, per-script timeout."""

    def execute(self, argv: list[str], timeout: float) -> ExecResult:
        started = time.monotonic()
        try:
            proc = subprocess.run(
                argv, capture_output=True, text=True, timeout=timeout, shell=False
            )
        except subprocess.TimeoutExpired as exc:
            return ExecResult(
                None,
                (exc.stdout or b"").decode("utf-8", "replace") if isinstance(exc.stdout, bytes) else (exc.stdout or ""),
                (exc.stderr or b"").decode("utf-8", "replace") if isinstance(exc.stderr, bytes) else (exc.stderr or ""),
                time.monotonic() - started,
                timed_out=True,
            )
        except (FileNotFoundError, PermissionError) as exc:
            return ExecResult(None, "", str(exc), time.monotonic() - started, failed_to_start=True)
        return ExecResult(proc.returncode, proc.stdout, proc.stderr, time.monotonic() - started)


def _cap(text: str) -> str:
    encoded = text.encode("utf-8")
    if len(encoded) <= STDOUT_CAP_BYTES:
        return text
    return encoded[:STDOUT_CAP_BYTES].decode("utf-8", "replace")


def run_script(
    script: VerificationScript,
    env,
    allow_unlisted: bool = False,
    time_ledger: list | None = None,
) -> VerificationResult:
    """Execute one check and classify its outcome.

    Commands outside the allowlist are refused (ExecError) unless the operator
    opted in. Every run lands in the optional time ledger for the session's
    verification-time accounting.
    """
    if not allow_unlisted and script.command[0] not in COMMAND_ALLOWLIST:
        result = VerificationResult(
            script_id=script.id,
            exit_code=None,
            stdout="",
            stderr=f"command {script.command[0]!r} not in allowlist; refused",
            duration_seconds=0.0,
            outcome=Outcome.EXEC_ERROR,
        )
    else:
        try:
            exec_result = env.execute(list(script.command), script.timeout)
        except CommandNotFound as exc:
            exec_result = ExecResult(None, "", str(exc), 0.0, failed_to_start=True)
        if exec_result.timed_out:
            outcome = Outcome.TIMEOUT
        elif exec_result.failed_to_start or exec_result.exit_code is None:
            outcome = Outcome.EXEC_ERROR
        else:
            outcome = compute_outcome(exec_result.exit_code, exec_result.stdout, script.success_rule)
        result = VerificationResult(
            script_id=script.id,
            exit_code=exec_result.exit_code,
            stdout=_cap(exec_result.stdout),
            stderr=_cap(exec_result.stderr),
            duration_seconds=exec_result.duration_seconds,
            outcome=outcome,
        )
    if time_ledger is not None:
        time_ledger.append((script.id, result.duration_seconds))
    return result


def verify_node(
    path: TaxonomyPath | str,
    taxonomy: Taxonomy,
    registry: ScriptRegistry,
    env,
    time_ledger: list | None = None,
) -> tuple[Outcome, list[VerificationResult]]:
    """Run every script bound to a node.

    Overall is Fail if any check tripped, Pass if all look healthy, and
    Inconclusive when there is nothing to run or runs degraded.
    """
    path = as_path(path)
    node = taxonomy.lookup(path)
    if node is None:
        raise KeyError(f"path {path} not in taxonomy")
    results = []
    for script_id in node.verification:
        script = registry.get(script_id)
        if script is None:
            continue
        results.append(run_script(script, env, time_ledger=time_ledger))
    if not results:
        return Outcome.INCONCLUSIVE, results
    outcomes = {r.outcome for r in results}
    if Outcome.FAIL in outcomes:
        return Outcome.FAIL, results
    if outcomes == {Outcome.PASS}:
        return Outcome.PASS, results
    return Outcome.INCONCLUSIVE, results


@dataclass
class DraftScript:
    script: VerificationScript
    status: str  # "draft" | "quarantined"
    reason: str | None = None

    def to_json(self) -> dict:
        return {"script": self.script.to_json(), "status": self.status, "reason": self.reason}


@dataclass
class ExtractionReport:
    drafts: list[DraftScript] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "drafts": [d.to_json() for d in self.drafts],
            "skipped": [{"label": l, "reason": r} for l, r in self.skipped],
        }


def extract_instructions(
    groups: dict[str, list],
    gateway,
    ledger=None,
    allowlist: frozenset[str] = COMMAND_ALLOWLIST,
) -> ExtractionReport:
    """Draft verification scripts from record groups sharing one label.

    Drafts stay drafts until promoted; non-allowlisted commands are
    quarantined rather than dropped so an operator can review them.
    """
    report = ExtractionReport()
    for label in sorted(groups):
        records = groups[label]
        discussions = [r.oce_discussion for r in records if r.oce_discussion]
        if not discussions:
            report.skipped.append((label, "no discussions to mine"))
            continue
        items, note = extract_checks(label, discussions, gateway, ledger)
        if note:
            report.skipped.append((label, note))
            continue
        if not items:
            report.skipped.append((label, "no extractable commands"))
            continue
        path = as_path(label)
        for n, item in enumerate(items, start=1):
            try:
                script = VerificationScript(
                    id=f"draft-{str(path).replace(' ', '_').replace('.', '-').lower()}-{n}",
                    bound_path=path,
                    level="leaf" if path.depth == 3 else "internal",
                    command=[str(c) for c in item["command"]],
                    success_rule=SuccessRule(
                        kind=RuleKind(item["success_rule"]), pattern=item.get("pattern")
                    ),
                )
            except ValueError as exc:
                report.skipped.append((label, f"invalid draft: {exc}"))
                continue
            if script.command[0] not in allowlist:
                report.drafts.append(
                    DraftScript(script=script, status="quarantined", reason="command not allowlisted")
                )
            else:
                report.drafts.append(DraftScript(script=script, status="draft"))
    return report
