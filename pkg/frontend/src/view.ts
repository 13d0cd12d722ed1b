import type {
  EvidenceItem,
  NodeStatus,
  TaxonomyDoc,
  TaxonomyNodeDoc,
  TraceViewModel,
} from "./types.js";

export type SessionStatus = "idle" | "running" | "awaiting_feedback" | "finished";

/** Everything the controller needs from a front end; the DOM view implements
 *  it for the browser and tests may substitute a recording adapter. */
export interface ViewAdapter {
  validationError(message: string): void;
  errorBanner(message: string | null): void;
  sessionStarted(id: string): void;
  statusChanged(status: SessionStatus): void;
  modelChanged(model: TraceViewModel): void;
  ticketLoaded(ticket: any): void;
}

export interface FeedbackHandlers {
  onAccept(): void;
  onDecline(): void;
  onText(text: string): void;
}

const STATUS_BADGES: Record<NodeStatus, string> = {
  unvisited: "",
  entered: "…",
  pruned: "pruned",
  "early-stopped": "<Early Stopping>",
  confirmed: "✓",
  rejected: "✗",
};

function el<K extends keyof HTMLElementTagNameMap>(
  doc: Document,
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = doc.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export class DomView implements ViewAdapter {
  private readonly doc: Document;
  private statusBadge: HTMLElement;
  private banner: HTMLElement;
  private treeHost: HTMLElement;
  private logHost: HTMLElement;
  private feedbackHost: HTMLElement;
  private outcomeHost: HTMLElement;
  private ticketHost: HTMLElement;
  private expanded = new Set<string>();
  private lastModel: TraceViewModel | null = null;

  constructor(
    private readonly root: HTMLElement,
    private readonly taxonomy: TaxonomyDoc,
    private readonly feedback: FeedbackHandlers,
  ) {
    this.doc = root.ownerDocument;
    this.banner = el(this.doc, "div", "banner");
    this.banner.setAttribute("data-role", "error-banner");
    this.banner.hidden = true;
    this.statusBadge = el(this.doc, "span", "status-badge", "idle");
    this.statusBadge.setAttribute("data-role", "status");
    this.treeHost = el(this.doc, "div", "tree");
    this.treeHost.setAttribute("data-role", "tree");
    this.logHost = el(this.doc, "div", "log");
    this.logHost.setAttribute("data-role", "log");
    this.feedbackHost = el(this.doc, "div", "feedback");
    this.feedbackHost.setAttribute("data-role", "feedback");
    this.outcomeHost = el(this.doc, "div", "outcome");
    this.outcomeHost.setAttribute("data-role", "outcome");
    this.ticketHost = el(this.doc, "div", "ticket");
    this.ticketHost.setAttribute("data-role", "ticket");

    const header = el(this.doc, "div", "session-header");
    header.append(el(this.doc, "span", "", "session: "), this.statusBadge);
    root.append(this.banner, header, this.treeHost, this.feedbackHost, this.outcomeHost, this.ticketHost, this.logHost);
  }

  validationError(message: string): void {
    this.errorBanner(message);
  }

  errorBanner(message: string | null): void {
    this.banner.hidden = message === null;
    this.banner.textContent = message ?? "";
  }

  sessionStarted(id: string): void {
    this.errorBanner(null);
    this.root.setAttribute("data-session", id);
  }

  statusChanged(status: SessionStatus): void {
    this.statusBadge.textContent = status;
    this.statusBadge.setAttribute("data-status", status);
  }

  modelChanged(model: TraceViewModel): void {
    this.lastModel = model;
    this.renderTree(model);
    this.renderFeedback(model);
    this.renderOutcome(model);
    this.renderLog(model);
  }

  ticketLoaded(ticket: any): void {
    this.ticketHost.replaceChildren();
    this.ticketHost.append(el(this.doc, "h3", "", "Escalation ticket"));
    const table = el(this.doc, "table", "hypotheses");
    table.setAttribute("data-role", "ticket-hypotheses");
    const head = el(this.doc, "tr");
    for (const title of ["hypothesis", "decision", "evidence"]) {
      head.append(el(this.doc, "th", "", title));
    }
    table.append(head);
    for (const tested of ticket.tested_hypotheses ?? []) {
      const row = el(this.doc, "tr");
      row.append(
        el(this.doc, "td", "", tested.path),
        el(this.doc, "td", "", tested.decision),
        el(this.doc, "td", "", (tested.evidence_digests ?? []).join(", ")),
      );
      table.append(row);
    }
    this.ticketHost.append(table);
    if ((ticket.feedback ?? []).length) {
      const list = el(this.doc, "ul", "ticket-feedback");
      for (const text of ticket.feedback) list.append(el(this.doc, "li", "", text));
      this.ticketHost.append(el(this.doc, "h4", "", "Customer feedback"), list);
    }
  }

  private renderTree(model: TraceViewModel): void {
    this.treeHost.replaceChildren();
    this.treeHost.append(this.renderNodes(this.taxonomy.nodes, "", model));
  }

  private renderNodes(nodes: TaxonomyNodeDoc[], prefix: string, model: TraceViewModel): HTMLElement {
    const list = el(this.doc, "ul", "branch");
    for (const node of nodes) {
      const path = prefix ? `${prefix}.${node.label}` : node.label;
      const status: NodeStatus = model.statuses[path] ?? "unvisited";
      const item = el(this.doc, "li", `node status-${status}`);
      item.setAttribute("data-path", path);
      item.setAttribute("data-status", status);
      const label = el(this.doc, "span", "label", node.label);
      item.append(label);
      if (STATUS_BADGES[status]) {
        item.append(el(this.doc, "span", "badge", STATUS_BADGES[status]));
      }
      if (status === "confirmed") {
        label.addEventListener("click", () => {
          this.expanded.has(path) ? this.expanded.delete(path) : this.expanded.add(path);
          if (this.lastModel) this.modelChanged(this.lastModel);
        });
        if (this.expanded.has(path)) {
          item.append(this.renderEvidence(model.evidence[path] ?? []));
        }
      }
      if (node.children?.length) {
        item.append(this.renderNodes(node.children, path, model));
      }
      list.append(item);
    }
    return list;
  }

  private renderEvidence(items: EvidenceItem[]): HTMLElement {
    const list = el(this.doc, "ul", "evidence");
    list.setAttribute("data-role", "evidence");
    for (const item of items) {
      list.append(el(this.doc, "li", "", `${item.scriptId} [${item.outcome}] ${item.digest}`));
    }
    return list;
  }

  private renderFeedback(model: TraceViewModel): void {
    this.feedbackHost.replaceChildren();
    if (!model.pendingFeedback) return;
    const prompt = model.pendingFeedback;
    this.feedbackHost.append(
      el(this.doc, "h3", "", `Suggestions (round ${prompt.round})`),
    );
    const list = el(this.doc, "ol", "suggestions");
    for (const text of prompt.suggestions) {
      list.append(el(this.doc, "li", "", `${text} (requires human execution)`));
    }
    this.feedbackHost.append(list);
    const textarea = el(this.doc, "textarea", "feedback-text");
    textarea.setAttribute("data-role", "feedback-text");
    const accept = el(this.doc, "button", "", "accept");
    accept.setAttribute("data-role", "feedback-accept");
    accept.addEventListener("click", () => this.feedback.onAccept());
    const decline = el(this.doc, "button", "", "decline");
    decline.setAttribute("data-role", "feedback-decline");
    decline.addEventListener("click", () => this.feedback.onDecline());
    const send = el(this.doc, "button", "", "send feedback");
    send.setAttribute("data-role", "feedback-send");
    send.addEventListener("click", () => this.feedback.onText(textarea.value));
    this.feedbackHost.append(textarea, accept, decline, send);
  }

  private renderOutcome(model: TraceViewModel): void {
    this.outcomeHost.replaceChildren();
    if (model.summary) {
      this.outcomeHost.append(el(this.doc, "p", "summary", model.summary));
    }
    if (model.outcome) {
      const line = `outcome: ${model.outcome.status}` +
        (model.outcome.resolvingPipeline ? ` (pipeline ${model.outcome.resolvingPipeline})` : "");
      this.outcomeHost.append(el(this.doc, "p", "outcome-line", line));
      if (model.outcome.rootCauses.length) {
        const list = el(this.doc, "ul", "root-causes");
        for (const cause of model.outcome.rootCauses) list.append(el(this.doc, "li", "", cause));
        this.outcomeHost.append(list);
      }
    }
    if (model.report) {
      const pre = el(this.doc, "pre", "report", model.report);
      pre.setAttribute("data-role", "report");
      this.outcomeHost.append(pre);
    }
  }

  private renderLog(model: TraceViewModel): void {
    this.logHost.replaceChildren();
    const list = el(this.doc, "ul", "events");
    for (const line of model.log.slice(-200)) {
      list.append(el(this.doc, "li", "", line));
    }
    this.logHost.append(list);
  }
}
