export interface TraceEvent {
  seq: number;
  ts: string;
  type: string;
  payload: Record<string, any>;
}

export type NodeStatus =
  | "unvisited"
  | "entered"
  | "pruned"
  | "early-stopped"
  | "confirmed"
  | "rejected";

export interface EvidenceItem {
  scriptId: string;
  outcome: string;
  digest: string;
}

export interface FeedbackPrompt {
  round: number;
  hypotheses: string[];
  suggestions: string[];
}

export interface OutcomeView {
  status: "resolved" | "advised" | "escalated";
  resolvingPipeline: number | null;
  rootCauses: string[];
}

/** Pure fold over the trace event stream; replaying the same events yields
 *  the same view. Node statuses come only from explicit events, never from
 *  client-side guessing. */
export interface TraceViewModel {
  statuses: Record<string, NodeStatus>;
  evidence: Record<string, EvidenceItem[]>;
  log: string[];
  summary: string | null;
  pendingFeedback: FeedbackPrompt | null;
  outcome: OutcomeView | null;
  report: string | null;
  ticketAvailable: boolean;
  finished: boolean;
}

export interface SessionView {
  id: string;
  status: "running" | "awaiting_feedback" | "finished";
  trace_cursor: number;
  outcome?: {
    status: string;
    resolving_pipeline: number | null;
    root_causes: string[];
    suggestions: string[];
    report: string;
  };
}

export interface TaxonomyNodeDoc {
  label: string;
  description?: string;
  children?: TaxonomyNodeDoc[];
}

export interface TaxonomyDoc {
  version: number;
  nodes: TaxonomyNodeDoc[];
}
