"""Synthetic desk-scale world: corpus, scenarios, and a scripted responder.

The proprietary incident data this system was designed around is not
shippable, so the repo carries a generated stand-in: a 60-incident corpus
(10 per main category), per-incident fault scenarios, and a deterministic
"oracle" chat backend that answers every agent prompt from the world's ground
truth. Fixture generation runs the real engine against the oracle while
recording the exchanges; tests and the evaluation harness then replay those
recordings, which keeps them byte-stable without any model in the loop.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path

from .corpus import HashingEmbedder, IncidentRecord, IncidentStore, KbSnippet, KnowledgeBase
from .gateway import ChatRequest, TokenUsage
from .taxonomy import Origin, Taxonomy, TaxonomyPath
from .util import canonical_json
from .verify import (
    RuleKind,
    ScriptRegistry,
    SimulatedEnvironment,
    SuccessRule,
    VerificationScript,
    run_script,
)

EPOCH = datetime(2023, 4, 3, 9, 0, tzinfo=timezone.utc)

# leaf path -> (scenario fault tag, leaf argv, one-line error flavor)
LEAF_SPECS: dict[str, tuple[str, list[str], str]] = {
    "GPU.MEMORY.ECC Error": (
        "ecc_uncorrectable",
        ["ecc-check"],
        "CUDA error: uncorrectable ECC error encountered during cublasGemmEx",
    ),
    "GPU.MEMORY.Page Retirement": (
        "page_retirement",
        ["retired-pages-check"],
        "GPU reports pending page retirements; job refuses to schedule on the node",
    ),
    "GPU.MEMORY.infoROM_Corruption": (
        "inforom_corrupt",
        ["inforom-check"],
        "nvidia-smi prints WARNING: infoROM is corrupted",
    ),
    "GPU.HARDWARE.Missing_GPU": (
        "gpu_missing",
        ["nvidia-smi"],
        "driver enumerates 7 of 8 GPUs; device 3 vanished from the PCI bus",
    ),
    "GPU.EXECUTION.Xid 48": (
        "xid_48",
        ["xid-scan"],
        "kern.log shows NVRM: Xid 48 double-bit ECC on the training GPU",
    ),
    "System Software.CUDA.Illegal_Mem_Access": (
        "illegal_mem_access",
        ["cuda-sample"],
        "CUDA error: an illegal memory access was encountered",
    ),
    "System Software.CUDA.Host_VM_Version_Mismatch": (
        "cuda_version_mismatch",
        ["version-check"],
        "invalid device ordinal inside the container; host VM driver older than container CUDA",
    ),
    "System Software.DRIVER.Driver_Version_Mismatch": (
        "driver_mismatch",
        ["driver-check"],
        "Failed to initialize NVML: Driver/library version mismatch",
    ),
    "System Software.OS.Kernel_Panic": (
        "kernel_panic",
        ["dmesg-check"],
        "node rebooted unexpectedly; kernel oops referencing the nvidia module",
    ),
    "Interconnect & Networking.NCCL.NCCL_Error": (
        "nccl_socket_refused",
        ["nccl-allreduce"],
        "NCCL WARN Connect to peer failed : Connection refused at socket.h:406",
    ),
    "Interconnect & Networking.NVLINK.NVLink_Failure": (
        "nvlink_inactive",
        ["nvlink", "-s"],
        "nvlink -s shows links to GPU1 inactive; allreduce hangs then aborts",
    ),
    "Interconnect & Networking.INFINIBAND.IB_Link_Flap": (
        "ib_link_flap",
        ["rdma-perftest"],
        "ib_write_bw collapses on one rail; link flap counters climb",
    ),
    "Interconnect & Networking.INFINIBAND.IB_HCA_Error": (
        "ib_hca_error",
        ["faultprobe", "ib_hca_error"],
        "HCA resets under load; port counters log symbol errors",
    ),
    "Framework & Library.PYTORCH.Framework_Assertion": (
        "framework_bug",
        ["framework-stress"],
        "autograd assertion failure in fused kernel after library upgrade",
    ),
    "Framework & Library.PYTORCH.Version_Incompatibility": (
        "framework_version_conflict",
        ["faultprobe", "framework_version_conflict"],
        "framework wheel built for an older toolkit; import warns then kernels fail to launch",
    ),
    "Framework & Library.CHECKPOINT.Checkpoint_Load_Failure": (
        "ckpt_corrupt",
        ["ckpt-load"],
        "checkpoint deserialization failed: truncated tensor storage",
    ),
    "User Application.CODE.User_Code_Bug": (
        "user_code_bug",
        ["faultprobe", "user_code_bug"],
        "IndexError raised inside custom collate_fn; only this job is affected",
    ),
    "User Application.CONFIGURATION.NCCL_IB_HCA_Misconfig": (
        "ib_hca_misconfig",
        ["nic-check"],
        "NCCL WARN NET/IB : Unable to open device mlx5_1",
    ),
    "User Application.CONFIGURATION.Wrong_Device_Selection": (
        "user_misconfig",
        ["faultprobe", "user_misconfig"],
        "CUDA_VISIBLE_DEVICES points at a device the VM does not expose",
    ),
    "Other.GENERAL.Storage_Outage": (
        "storage_outage",
        ["faultprobe", "storage_outage"],
        "dataset mounts hang; blob storage frontend returns 503",
    ),
    "Other.GENERAL.Quota_Exceeded": (
        "quota_exceeded",
        ["faultprobe", "quota_exceeded"],
        "job admission rejected: GPU quota exhausted for the subscription",
    ),
}

# leaves present in the taxonomy without historical incidents (guide-derived)
TSG_LEAVES: dict[str, tuple[list[str], str]] = {
    "GPU.MEMORY.Memory_Hardware_Fault": (
        ["inforom-check"],
        "Board-level GPU memory fault visible through infoROM/board diagnostics.",
    ),
    "GPU.HARDWARE.Overheating": (
        ["faultprobe", "gpu_overheat"],
        "Thermal throttling or shutdown from cooling failure.",
    ),
    "GPU.EXECUTION.GPU_Execution_Error": (
        ["faultprobe", "gpu_exec_error"],
        "Kernel launch or execution faults not tied to a specific Xid class.",
    ),
    "System Software.CUDA.CUDA_Init_Failure": (
        ["faultprobe", "cuda_init_failure"],
        "cuInit fails before any kernel runs; often container runtime related.",
    ),
    "System Software.DRIVER.Driver_Crash": (
        ["faultprobe", "driver_crash"],
        "Driver wedges and resets; devices disappear until reboot.",
    ),
}

SUB_DESCRIPTIONS = {
    "GPU.MEMORY": "GPU memory subsystem faults (ECC, retirement, infoROM).",
    "GPU.HARDWARE": "Physical GPU presence, power, and thermal faults.",
    "GPU.EXECUTION": "Faults raised while executing kernels on the GPU.",
    "System Software.CUDA": "CUDA runtime and toolkit level failures.",
    "System Software.DRIVER": "GPU driver installation and stability issues.",
    "System Software.OS": "Operating-system level faults on the node.",
    "Interconnect & Networking.NCCL": "Collective-communication layer failures.",
    "Interconnect & Networking.NVLINK": "NVLink fabric faults.",
    "Interconnect & Networking.INFINIBAND": "InfiniBand fabric and NIC faults.",
    "Framework & Library.PYTORCH": "Training-framework runtime faults.",
    "Framework & Library.CHECKPOINT": "Model/checkpoint serialization faults.",
    "User Application.CODE": "Bugs in customer training code.",
    "User Application.CONFIGURATION": "Customer-side configuration mistakes.",
    "Other.GENERAL": "Faults outside the GPU/software/network stack.",
}

MAIN_DESCRIPTIONS = {
    "GPU": "Incidents related to GPU hardware.",
    "System Software": "System-level software: GPU driver, CUDA, node OS.",
    "Interconnect & Networking": "Network and high-speed interconnect incidents.",
    "Framework & Library": "AI framework and library incidents.",
    "User Application": "Customer application errors and configuration conflicts.",
    "Other": "Incidents that fit none of the other categories.",
}

# per-category incident allocation: (leaf, count) summing to 10 per main
CORPUS_PLAN: list[tuple[str, int]] = [
    ("GPU.MEMORY.ECC Error", 3),
    ("GPU.HARDWARE.Missing_GPU", 2),
    ("GPU.EXECUTION.Xid 48", 2),
    ("GPU.MEMORY.infoROM_Corruption", 2),
    ("GPU.MEMORY.Page Retirement", 1),
    ("System Software.CUDA.Illegal_Mem_Access", 3),
    ("System Software.CUDA.Host_VM_Version_Mismatch", 4),
    ("System Software.DRIVER.Driver_Version_Mismatch", 2),
    ("System Software.OS.Kernel_Panic", 1),
    ("Interconnect & Networking.NCCL.NCCL_Error", 3),
    ("Interconnect & Networking.NVLINK.NVLink_Failure", 3),
    ("Interconnect & Networking.INFINIBAND.IB_Link_Flap", 2),
    ("Interconnect & Networking.INFINIBAND.IB_HCA_Error", 2),
    ("Framework & Library.PYTORCH.Framework_Assertion", 4),
    ("Framework & Library.PYTORCH.Version_Incompatibility", 3),
    ("Framework & Library.CHECKPOINT.Checkpoint_Load_Failure", 3),
    ("User Application.CODE.User_Code_Bug", 4),
    ("User Application.CONFIGURATION.NCCL_IB_HCA_Misconfig", 3),
    ("User Application.CONFIGURATION.Wrong_Device_Selection", 3),
    ("Other.GENERAL.Storage_Outage", 5),
    ("Other.GENERAL.Quota_Exceeded", 5),
]

KB_SNIPPETS = [
    ("kb-001", "Control-plane NIC convention",
     "On the 8-HCA SKU, mlx5_1 is the control-plane Ethernet device. NCCL_IB_HCA must list only the data-plane IB devices; including mlx5_1 produces 'Unable to open device' warnings even on healthy hardware."),
    ("kb-002", "Uncorrectable ECC handling",
     "An uncorrectable ECC error aborts the CUDA context and usually leaves pending page retirements. Reboot clears volatile state; recurring DBE counts mean the board needs replacement."),
    ("kb-003", "Container vs host CUDA versions",
     "The container CUDA runtime must not be newer than what the host VM driver supports. Symptoms include 'invalid device ordinal' and init failures that survive reboots while the same image works elsewhere."),
    ("kb-004", "NVLink verification",
     "Check per-GPU link state before blaming NCCL: inactive NVLink links make collectives fail with generic connection errors."),
    ("kb-005", "IB diagnosis inside containers",
     "Standard IB tools are blocked inside customer containers on this SKU; use the cluster-provided nic-check wrapper instead of ibv_devinfo."),
    ("kb-006", "Checkpoint integrity",
     "Truncated checkpoint uploads surface as deserialization errors at resume time; verify object sizes against the manifest before restarting long jobs."),
    ("kb-007", "Quota and admission failures",
     "Admission rejections name the exhausted resource pool; they are not infrastructure faults and resolve through the quota portal."),
]


def _record_description(leaf: str, index: int, node: int, job: int) -> str:
    _, _, flavor = LEAF_SPECS[leaf]
    return (
        f"Job {job:04d} on node-{node:02d} failed: {flavor}. "
        f"Report #{index} filed from the workload portal."
    )


def _record_discussion(leaf: str, argv: list[str], extra: str = "") -> str:
    cmd = " ".join(argv)
    return (
        f"OCE: reproduced on the node and ran `$ {cmd}`; output matched the {leaf.split('.')[-1]} signature. "
        f"Mitigated per runbook.{extra}"
    )


def build_default_taxonomy() -> tuple[Taxonomy, ScriptRegistry]:
    """Code-built canonical taxonomy plus the script registry bound into it."""
    tax = Taxonomy.bootstrap()
    for main, desc in MAIN_DESCRIPTIONS.items():
        tax.lookup(main).description = desc

    registry = ScriptRegistry()

    # internal checks per main category
    internal = {
        "GPU": [
            ("chk-gpu-config", ["nvidia-smi"]),
            ("chk-gpu-nvlink", ["nvlink", "-s"]),
            ("chk-gpu-bandwidth", ["bandwidth-test"]),
            ("chk-gpu-execution", ["gemm-check"]),
        ],
        "System Software": [
            ("chk-sys-cuda", ["cuda-sample"]),
            ("chk-sys-driver", ["driver-check"]),
            ("chk-sys-dmesg", ["dmesg-check"]),
            ("chk-sys-config", ["sysconfig-check"]),
        ],
        "Interconnect & Networking": [
            ("chk-net-collective", ["nccl-allreduce"]),
            ("chk-net-nic", ["nic-check"]),
            ("chk-net-nvlink-pcie", ["nvlink", "-s"]),
            ("chk-net-rdma", ["rdma-perftest"]),
        ],
        "Framework & Library": [
            ("chk-fwk-train", ["train-smoke"]),
            ("chk-fwk-stress", ["framework-stress"]),
            ("chk-fwk-ckpt", ["ckpt-load"]),
            ("chk-fwk-versions", ["version-check"]),
        ],
        "User Application": [("chk-user-train", ["train-smoke"])],
        "Other": [("chk-other-support", ["support-note"])],
    }
    sub_checks = {
        "GPU.MEMORY": ["ecc-check"],
        "GPU.HARDWARE": ["nvidia-smi"],
        "GPU.EXECUTION": ["gemm-check"],
        "System Software.CUDA": ["cuda-sample"],
        "System Software.DRIVER": ["driver-check"],
        "System Software.OS": ["dmesg-check"],
        "Interconnect & Networking.NCCL": ["nccl-allreduce"],
        "Interconnect & Networking.NVLINK": ["nvlink", "-s"],
        "Interconnect & Networking.INFINIBAND": ["rdma-perftest"],
        "Framework & Library.PYTORCH": ["framework-stress"],
        "Framework & Library.CHECKPOINT": ["ckpt-load"],
        "User Application.CODE": ["train-smoke"],
        "User Application.CONFIGURATION": ["nic-check"],
        "Other.GENERAL": ["support-note"],
    }

    records = synthetic_records()
    first_seen: dict[str, datetime] = {}
    for record in records:
        key = str(record.root_cause)
        if key not in first_seen or record.created_at < first_seen[key]:
            first_seen[key] = record.created_at

    # subs stamped by their earliest leaf, leaves by first incident
    for sub_path, desc in SUB_DESCRIPTIONS.items():
        leaf_dates = [
            ts for leaf, ts in first_seen.items() if leaf.startswith(sub_path + ".")
        ]
        created = min(leaf_dates) if leaf_dates else EPOCH
        tax.upsert_label(sub_path, desc, Origin.INCIDENT_DERIVED, created)

    for leaf, (_, _, flavor) in LEAF_SPECS.items():
        tax.upsert_label(
            leaf,
            f"{leaf.split('.')[-1]}: {flavor}.",
            Origin.INCIDENT_DERIVED,
            first_seen.get(leaf, EPOCH),
        )
    for leaf, (argv, desc) in TSG_LEAVES.items():
        tax.upsert_label(leaf, desc, Origin.TSG_DERIVED, EPOCH + timedelta(days=380))

    def slug(path: str) -> str:
        return path.lower().replace(" & ", "-").replace(" ", "_").replace(".", "-")

    for main, checks in internal.items():
        node = tax.lookup(main)
        for script_id, argv in checks:
            registry.add(
                VerificationScript(
                    id=script_id,
                    bound_path=TaxonomyPath.parse(main),
                    level="internal",
                    command=argv,
                    timeout=300.0,
                    success_rule=SuccessRule(RuleKind.EXIT_ZERO),
                )
            )
            node.verification.append(script_id)
    for sub_path, argv in sub_checks.items():
        script_id = f"chk-{slug(sub_path)}"
        registry.add(
            VerificationScript(
                id=script_id,
                bound_path=TaxonomyPath.parse(sub_path),
                level="internal",
                command=argv,
                timeout=300.0,
                success_rule=SuccessRule(RuleKind.EXIT_ZERO),
            )
        )
        tax.lookup(sub_path).verification.append(script_id)
    for leaf, (_, argv, _) in LEAF_SPECS.items():
        script_id = f"leaf-{slug(leaf)}"
        registry.add(
            VerificationScript(
                id=script_id,
                bound_path=TaxonomyPath.parse(leaf),
                level="leaf",
                command=argv,
                timeout=300.0,
                success_rule=SuccessRule(RuleKind.EXIT_ZERO),
            )
        )
        tax.lookup(leaf).verification.append(script_id)
    for leaf, (argv, _) in TSG_LEAVES.items():
        script_id = f"leaf-{slug(leaf)}"
        registry.add(
            VerificationScript(
                id=script_id,
                bound_path=TaxonomyPath.parse(leaf),
                level="leaf",
                command=argv,
                timeout=300.0,
                success_rule=SuccessRule(RuleKind.EXIT_ZERO),
            )
        )
        tax.lookup(leaf).verification.append(script_id)
    return tax, registry


def synthetic_records() -> list[IncidentRecord]:
    """The 60-incident corpus: 10 per main category, spread over 12 months."""
    records = []
    index = 0
    for leaf, count in CORPUS_PLAN:
        for n in range(count):
            created = EPOCH + timedelta(days=(index * 6) % 360, hours=index % 11)
            ttm_hours = 2 + (index * 37) % 180
            extra = ""
            if leaf == "Other.GENERAL.Storage_Outage" and n == 0:
                extra = " Also proposed `$ reboot` to clear stuck mounts (declined, too invasive)."
            _, argv, _ = LEAF_SPECS[leaf]
            records.append(
                IncidentRecord(
                    id=f"SYN-{index + 1:04d}",
                    description=_record_description(leaf, index + 1, node=(index * 7) % 40, job=1000 + index),
                    oce_discussion=_record_discussion(leaf, argv, extra),
                    root_cause=TaxonomyPath.parse(leaf),
                    created_at=created,
                    resolved_at=created + timedelta(hours=ttm_hours),
                )
            )
            index += 1
    return records


def scenario_for(record: IncidentRecord) -> dict:
    fault, _, _ = LEAF_SPECS[str(record.root_cause)]
    return {"faults": [fault], "overrides": []}


def build_kb() -> KnowledgeBase:
    provider = HashingEmbedder()
    snippets = [
        KbSnippet(id=i, title=t, text=x, embedding=provider.embed(t + " " + x))
        for i, t, x in KB_SNIPPETS
    ]
    return KnowledgeBase(snippets)


def corrupt_labels(records: list[IncidentRecord], fraction: float = 0.2) -> list[IncidentRecord]:
    """Reassign every k-th record's label to a leaf in a different main category."""
    leaves = list(LEAF_SPECS)
    step = max(1, round(1 / fraction))
    out = []
    for i, record in enumerate(records):
        if i % step == 0:
            current_main = record.root_cause.main_category
            swapped = None
            for offset in range(1, len(leaves)):
                candidate = leaves[(i + offset * 7) % len(leaves)]
                if not candidate.startswith(current_main + "."):
                    swapped = candidate
                    break
            out.append(replace(record, root_cause=TaxonomyPath.parse(swapped)))
        else:
            out.append(record)
    return out


# ---------------------------------------------------------------------------
# oracle backend

@dataclass
class OracleContext:
    """World knowledge the scripted responder answers from."""

    taxonomy: Taxonomy | None = None
    registry: ScriptRegistry | None = None
    env: SimulatedEnvironment | None = None
    rank_overrides: dict[str, list[str]] = field(default_factory=dict)
    reflect_overrides: dict[str, str] = field(default_factory=dict)
    summary_override: str | None = None
    conclude_override: str | None = None
    truth_by_id: dict[str, str] = field(default_factory=dict)
    leaf_descriptions: dict[str, str] = field(default_factory=dict)


class OracleBackend:
    """Answers agent prompts from ground truth; stands in for a live model.

    Ranking picks the children whose subtree contains a leaf with a currently
    failing check; reflection confirms a hypothesis when its own evidence
    entries contain a failure. Overrides force specific behaviour for golden
    scenarios.
    """

    name = "synthetic"

    def __init__(self, ctx: OracleContext):
        self.ctx = ctx

    # -- prompt field helpers ------------------------------------------------

    @staticmethod
    def _section(text: str, title: str) -> str:
        pattern = rf"^## {re.escape(title)}\n(.*?)(?=^## |\Z)"
        match = re.search(pattern, text, re.MULTILINE | re.DOTALL)
        return match.group(1).strip() if match else ""

    def _last_user(self, req: ChatRequest) -> str:
        for message in reversed(req.messages):
            if message.role == "user":
                return message.content
        return ""

    # -- per-role answers ------------------------------------------------------

    def complete(self, req: ChatRequest) -> tuple[str, TokenUsage | None]:
        system = req.messages[0].content
        user = self._last_user(req)
        if "summarization agent" in system:
            return self._answer_summary(user), None
        if "retrieval reranker" in system:
            return self._answer_rerank(user), None
        if "planning agent" in system:
            return self._answer_rank(user), None
        if "reflection agent" in system:
            return self._answer_reflect(user), None
        if "conclusion agent" in system:
            return self._answer_conclude(user), None
        if "exploration agent" in system:
            return self._answer_explore(user), None
        if "labelling agent" in system:
            return self._answer_pass1(user), None
        if "refinement agent" in system:
            return self._answer_refine(user), None
        if "verification extraction agent" in system:
            return self._answer_extract(user), None
        raise AssertionError(f"oracle got an unknown role: {system[:80]}")

    def _answer_summary(self, user: str) -> str:
        if self.ctx.summary_override:
            return self.ctx.summary_override
        incident = self._section(user, "Incident")
        first = incident.splitlines()[0] if incident else ""
        return f"Key facts: {first}"

    def _answer_rerank(self, user: str) -> str:
        ids = re.findall(r"id=(\S+) similarity", self._section(user, "Candidates"))
        return "```json\n" + json.dumps(ids) + "\n```"

    def _subtree_trips(self, path: TaxonomyPath) -> bool:
        node = self.ctx.taxonomy.lookup(path)
        if node is None:
            return False
        stack = [(path, node)]
        while stack:
            current_path, current = stack.pop()
            if current.is_leaf:
                for script_id in current.verification:
                    script = self.ctx.registry.get(script_id)
                    if script is None:
                        continue
                    result = run_script(script, self.ctx.env)
                    if result.outcome.value == "fail":
                        return True
            else:
                for child in current.children:
                    stack.append((current_path.child(child.label), child))
        return False

    def _answer_rank(self, user: str) -> str:
        node_text = self._section(user, "Node")
        candidates = re.findall(r"^\d+\.\s(.+?):\s", self._section(user, "Candidates"), re.MULTILINE)
        key = "" if node_text == "(taxonomy root)" else node_text
        if key in self.ctx.rank_overrides:
            ranked = [c for c in self.ctx.rank_overrides[key] if c in candidates]
        else:
            base = TaxonomyPath.parse(node_text) if key else None
            ranked = []
            for label in candidates:
                child_path = base.child(label) if base else TaxonomyPath.of(label)
                if self._subtree_trips(child_path):
                    ranked.append(label)
        return "```json\n" + json.dumps(ranked) + "\n```"

    def _answer_reflect(self, user: str) -> str:
        hypothesis = self._section(user, "Hypothesis")
        entries = re.findall(
            r"^- \[(E\d+)\] path=(.+?) script=(\S+) outcome=(\S+)",
            self._section(user, "Evidence"),
            re.MULTILINE,
        )
        own_failures = [eid for eid, path, _, outcome in entries if path == hypothesis and outcome == "fail"]
        decision = self.ctx.reflect_overrides.get(hypothesis)
        if decision is None:
            decision = "confirmed" if own_failures else "rejected"
        if decision == "confirmed":
            cited = own_failures or [entries[0][0]]
            rationale = "its own verification checks tripped on this node"
        elif decision == "rejected":
            cited = [entries[0][0]] if entries else []
            rationale = "verification for this hypothesis came back healthy"
        else:
            cited = []
            rationale = "evidence is insufficient either way"
        doc = {"decision": decision, "rationale": rationale, "evidence_ids": cited}
        return "```json\n" + json.dumps(doc) + "\n```"

    def _answer_conclude(self, user: str) -> str:
        if self.ctx.conclude_override:
            return self.ctx.conclude_override
        roots = [
            line[2:] for line in self._section(user, "Validated root causes").splitlines() if line.startswith("- ")
        ]
        if roots:
            return "Diagnosis complete. Validated root causes: " + "; ".join(roots) + "."
        return "No hypothesis survived verification; the collected evidence is attached for escalation."

    def _answer_explore(self, user: str) -> str:
        notes = [
            line[2:].split(":", 1)[0]
            for line in self._section(user, "Domain notes").splitlines()
            if line.startswith("- ")
        ]
        feedback = self._section(user, "Customer feedback")
        revised = feedback not in ("", "(none yet)")
        suffix = " (revised after feedback)" if revised else ""
        hypotheses = [f"Possible issue: {n}{suffix}" for n in notes[:2]] or [f"Collect more logs{suffix}"]
        suggestions = [
            f"Walk through: {n}{suffix}" for n in notes[:2]
        ] or [f"Capture a support bundle and attach dmesg{suffix}"]
        doc = {"hypotheses": hypotheses, "suggestions": suggestions}
        return "```json\n" + json.dumps(doc) + "\n```"

    def _answer_pass1(self, user: str) -> str:
        ids = re.findall(r"^- id=(\S+)", self._section(user, "Incidents"), re.MULTILINE)
        items = []
        for incident_id in ids:
            label = self.ctx.truth_by_id.get(incident_id)
            if label is None:
                continue
            items.append(
                {
                    "id": incident_id,
                    "label": label,
                    "description": self.ctx.leaf_descriptions.get(label, f"{label.split('.')[-1]} fault."),
                }
            )
        return "```json\n" + json.dumps(items) + "\n```"

    def _answer_refine(self, user: str) -> str:
        label = self._section(user, "Label")
        canonical = self.ctx.leaf_descriptions.get(label)
        if canonical:
            return canonical
        existing = self._section(user, "Existing description")
        return existing or self._section(user, "New candidate description")

    def _answer_extract(self, user: str) -> str:
        commands = []
        for match in re.finditer(r"`\$ ([^`]+)`", self._section(user, "Discussions")):
            argv = match.group(1).split()
            if argv not in commands:
                commands.append(argv)
        items = [{"command": argv, "success_rule": "exit_zero", "pattern": None} for argv in commands]
        return "```json\n" + json.dumps(items) + "\n```"


class RecordingBackend:
    """Wraps a backend and captures every exchange as a replay script entry."""

    def __init__(self, inner):
        self.inner = inner
        self.name = inner.name
        self.entries: list[dict] = []

    def complete(self, req: ChatRequest) -> tuple[str, TokenUsage | None]:
        text, usage = self.inner.complete(req)
        user = ""
        for message in reversed(req.messages):
            if message.role == "user":
                user = message.content
                break
        self.entries.append(
            {
                "digest": req.digest(),
                "request_summary": f"{req.response_grammar or 'free-text'}: {user[:90]}",
                "response_text": text,
                "usage": None,
            }
        )
        return text, usage

    def dump(self, path: str | Path):
        lines = [canonical_json(entry) for entry in self.entries]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def world_truths(records: list[IncidentRecord]) -> dict[str, str]:
    return {r.id: str(r.root_cause) for r in records if r.root_cause is not None}


def world_leaf_descriptions() -> dict[str, str]:
    out = {leaf: f"{leaf.split('.')[-1]}: {flavor}." for leaf, (_, _, flavor) in LEAF_SPECS.items()}
    out.update({leaf: desc for leaf, (_, desc) in TSG_LEAVES.items()})
    return out


def oracle_for_record(
    taxonomy: Taxonomy,
    registry: ScriptRegistry,
    record: IncidentRecord,
    scenario: dict | None = None,
    **overrides,
) -> OracleBackend:
    env = SimulatedEnvironment.from_scenario(scenario or scenario_for(record))
    return OracleBackend(
        OracleContext(taxonomy=taxonomy, registry=registry, env=env, **overrides)
    )


def build_store(records: list[IncidentRecord]) -> IncidentStore:
    provider = HashingEmbedder()
    store = IncidentStore()
    for record in records:
        store.ingest(record, provider)
    return store
