import type { EvidenceItem, NodeStatus, TraceEvent, TraceViewModel } from "./types.js";

export function emptyModel(): TraceViewModel {
  return {
    statuses: {},
    evidence: {},
    log: [],
    summary: null,
    pendingFeedback: null,
    outcome: null,
    report: null,
    ticketAvailable: false,
    finished: false,
  };
}

/** Parse one line of the trace stream; heartbeat comments and blanks yield null. */
export function parseTraceLine(line: string): TraceEvent | null {
  const trimmed = line.trim();
  if (!trimmed || trimmed.startsWith(":")) return null;
  const raw = JSON.parse(trimmed);
  return { seq: raw.seq, ts: raw.ts, type: raw.type, payload: raw.payload ?? {} };
}

function setStatus(model: TraceViewModel, path: string, status: NodeStatus): void {
  if (!path) return; // the synthetic root is not a visible node
  model.statuses[path] = status;
}

function childPath(parent: string, child: string): string {
  return parent ? `${parent}.${child}` : child;
}

function logLine(event: TraceEvent, text: string): string {
  return `#${event.seq} ${event.type}: ${text}`;
}

/** Incremental fold: mutates and returns the model. */
export function applyEvent(model: TraceViewModel, event: TraceEvent): TraceViewModel {
  const p = event.payload;
  switch (event.type) {
    case "session_started":
      model.log.push(logLine(event, String(p.incident_id ?? "")));
      break;
    case "summary":
      model.summary = String(p.text ?? "");
      model.log.push(logLine(event, p.degraded ? "(degraded)" : "ok"));
      break;
    case "pipeline_started":
      model.log.push(logLine(event, `pipeline ${p.pipeline}`));
      break;
    case "pipeline_finished":
      model.log.push(logLine(event, `pipeline ${p.pipeline} -> ${p.result}`));
      break;
    case "retrieval":
      model.log.push(logLine(event, `${(p.hits ?? []).length} hit(s)${p.note ? ` (${p.note})` : ""}`));
      break;
    case "node_entered":
      if (p.path) setStatus(model, p.path, "entered");
      model.log.push(logLine(event, p.path || "(root)"));
      break;
    case "hypotheses_ranked":
      model.log.push(
        logLine(event, `${p.path || "(root)"} -> [${(p.ordered ?? []).join(", ")}]`),
      );
      break;
    case "branch_pruned":
      setStatus(model, childPath(p.path ?? "", p.child), "pruned");
      model.log.push(logLine(event, childPath(p.path ?? "", p.child)));
      break;
    case "early_stop":
      if (p.path) setStatus(model, p.path, "early-stopped");
      model.log.push(logLine(event, `${p.path || "(root)"} <Early Stopping>`));
      break;
    case "evidence_collected": {
      const items: EvidenceItem[] = (p.results ?? []).map((r: any) => ({
        scriptId: r.script_id,
        outcome: r.outcome,
        digest: r.digest,
      }));
      const bucket = model.evidence[p.path] ?? [];
      model.evidence[p.path] = bucket.concat(items);
      model.log.push(logLine(event, `${p.path} overall=${p.overall}`));
      break;
    }
    case "verdict":
      // inconclusive is rejected-for-traversal; the log keeps the distinction
      setStatus(model, p.path, p.decision === "confirmed" ? "confirmed" : "rejected");
      model.log.push(logLine(event, `${p.path} -> ${p.decision}`));
      break;
    case "backtrack":
      model.log.push(logLine(event, `${p.from_path} -> ${p.path || "(root)"}`));
      break;
    case "budget_exceeded":
      model.log.push(logLine(event, `limit ${p.limit}`));
      break;
    case "suggestions":
      model.pendingFeedback = {
        round: Number(p.round ?? 0),
        hypotheses: (p.hypotheses ?? []).map(String),
        suggestions: (p.suggestions ?? []).map(String),
      };
      model.log.push(logLine(event, `round ${p.round}: ${(p.suggestions ?? []).length} suggestion(s)`));
      break;
    case "awaiting_feedback":
      model.log.push(logLine(event, `round ${p.round}`));
      break;
    case "feedback":
      model.pendingFeedback = null;
      model.log.push(logLine(event, `${p.kind}${p.text ? `: ${p.text}` : ""}`));
      break;
    case "ticket_created":
      model.ticketAvailable = true;
      model.log.push(logLine(event, String(p.incident_digest ?? "")));
      break;
    case "degradation":
      model.log.push(logLine(event, `${p.where}: ${p.note}`));
      break;
    case "outcome":
      model.outcome = {
        status: p.status,
        resolvingPipeline: p.resolving_pipeline ?? null,
        rootCauses: (p.root_causes ?? []).map(String),
      };
      model.log.push(logLine(event, p.status));
      break;
    case "report":
      model.report = String(p.text ?? "");
      model.log.push(logLine(event, "ready"));
      break;
    case "session_finished":
      model.finished = true;
      model.pendingFeedback = null;
      model.log.push(logLine(event, "done"));
      break;
    default:
      model.log.push(logLine(event, JSON.stringify(p)));
  }
  return model;
}

export function foldTrace(events: TraceEvent[]): TraceViewModel {
  const model = emptyModel();
  for (const event of events) applyEvent(model, event);
  return model;
}

export function foldTraceFile(text: string): TraceViewModel {
  const events: TraceEvent[] = [];
  for (const line of text.split("\n")) {
    const event = parseTraceLine(line);
    if (event) events.push(event);
  }
  return foldTrace(events);
}
