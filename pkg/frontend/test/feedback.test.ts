// @vitest-environment happy-dom
//
// Scripted browser round-trip: submit -> AwaitingFeedback -> text feedback ->
// decline -> ticket view, with the 409 guard exercised once along the way.
// The server is an in-memory state machine speaking the real wire format.
import { describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { ConsoleApp } from "../src/app.js";
import { DomView } from "../src/view.js";
import type { TaxonomyDoc } from "../src/types.js";

const TAXONOMY: TaxonomyDoc = {
  version: 1,
  nodes: [
    { label: "GPU", children: [{ label: "MEMORY", children: [{ label: "ECC Error" }] }] },
    { label: "Other", children: [] },
  ],
};

function line(seq: number, type: string, payload: Record<string, unknown>): string {
  return JSON.stringify({ seq, ts: `2024-01-01T00:00:${String(seq).padStart(2, "0")}Z`, type, payload });
}

type Status = "running" | "awaiting_feedback" | "finished";

class ScriptedServer {
  requests: string[] = [];
  feedback: Array<{ action: string; text?: string }> = [];
  private events: string[] = [];
  private status: Status = "running";
  private started = false;
  private waiters: Array<() => void> = [];
  private ticket = {
    incident_digest: "abc123",
    tested_hypotheses: [
      { path: "GPU.MEMORY.ECC Error", decision: "rejected", evidence_digests: ["d1"] },
    ],
    feedback: ["suggestion 1 did not help"],
  };

  /** phase 0 runs up to the first feedback prompt */
  releaseInitialEvents(): void {
    this.push(
      [
        line(1, "session_started", { incident_id: "WEB-1" }),
        line(2, "summary", { text: "stuck job, clean logs", degraded: false }),
        line(3, "pipeline_started", { pipeline: 3 }),
        line(4, "suggestions", { pipeline: 3, round: 1, hypotheses: ["h1"], suggestions: ["try s1"] }),
        line(5, "awaiting_feedback", { round: 1 }),
      ],
      "awaiting_feedback",
    );
  }

  private push(lines: string[], status: Status): void {
    this.events.push(...lines);
    this.status = status;
    const waiters = this.waiters.splice(0);
    for (const wake of waiters) wake();
  }

  private handleFeedback(action: string, text?: string): void {
    this.feedback.push(text === undefined ? { action } : { action, text });
    if (action === "text") {
      this.push(
        [
          line(6, "feedback", { round: 1, kind: "text", text }),
          line(7, "suggestions", { pipeline: 3, round: 2, hypotheses: ["h2"], suggestions: ["try s2"] }),
          line(8, "awaiting_feedback", { round: 2 }),
        ],
        "awaiting_feedback",
      );
    } else {
      this.push(
        [
          line(9, "feedback", { round: 2, kind: "decline", text: null }),
          line(10, "ticket_created", { incident_digest: "abc123" }),
          line(11, "pipeline_finished", { pipeline: 3, result: "escalated" }),
          line(12, "outcome", { status: "escalated", resolving_pipeline: null, root_causes: [] }),
          line(13, "report", { text: "UNRESOLVED" }),
          line(14, "session_finished", {}),
        ],
        "finished",
      );
    }
  }

  fetch = async (url: string, init?: RequestInit): Promise<Response> => {
    const method = init?.method ?? "GET";
    this.requests.push(`${method} ${url}`);
    const { pathname, searchParams } = new URL(url, "http://test");

    if (method === "POST" && pathname === "/sessions") {
      this.started = true;
      return Response.json({ id: "S1" }, { status: 201 });
    }
    if (!this.started || !pathname.startsWith("/sessions/S1")) {
      return Response.json(
        { error: { code: "unknown_session", message: "no such session" } },
        { status: 404 },
      );
    }
    if (method === "GET" && pathname === "/sessions/S1") {
      return Response.json({ id: "S1", status: this.status, trace_cursor: this.events.length });
    }
    if (method === "GET" && pathname === "/sessions/S1/trace") {
      const cursor = Number(searchParams.get("cursor") ?? "0");
      if (cursor >= this.events.length && this.status !== "finished") {
        await new Promise<void>((resolve) => this.waiters.push(resolve));
      }
      const chunk = this.events.slice(cursor);
      return new Response(chunk.map((l) => l + "\n").join(""), {
        headers: { "Content-Type": "application/x-ndjson" },
      });
    }
    if (method === "POST" && pathname === "/sessions/S1/feedback") {
      if (this.status !== "awaiting_feedback") {
        return Response.json(
          { error: { code: "not_awaiting_feedback", message: `session is ${this.status}` } },
          { status: 409 },
        );
      }
      const body = JSON.parse(String(init?.body ?? "{}"));
      this.handleFeedback(body.action, body.text ?? undefined);
      return Response.json({ status: "accepted" }, { status: 202 });
    }
    if (method === "GET" && pathname === "/sessions/S1/ticket") {
      if (this.status !== "finished") {
        return Response.json(
          { error: { code: "not_finished", message: "still running" } },
          { status: 409 },
        );
      }
      return Response.json(this.ticket);
    }
    return Response.json({ error: { code: "bad_route", message: pathname } }, { status: 404 });
  };
}

async function waitFor(predicate: () => boolean, what: string, timeoutMs = 3000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    if (predicate()) return;
    await new Promise((resolve) => setTimeout(resolve, 5));
  }
  throw new Error(`timed out waiting for ${what}`);
}

function setup() {
  const server = new ScriptedServer();
  const api = new ApiClient("http://test", server.fetch);
  const root = document.createElement("div");
  document.body.appendChild(root);
  let app: ConsoleApp;
  const view = new DomView(root, TAXONOMY, {
    onAccept: () => void app.sendFeedback("accept"),
    onDecline: () => void app.sendFeedback("decline"),
    onText: (text) => void app.sendFeedback("text", text),
  });
  app = new ConsoleApp(api, view);
  return { server, app, root, view };
}

describe("feedback round-trip", () => {
  it("empty description is rejected client-side without any request", async () => {
    const { server, app, root } = setup();
    const id = await app.submit("   ");
    expect(id).toBeNull();
    expect(server.requests).toHaveLength(0);
    const banner = root.querySelector('[data-role="error-banner"]')!;
    expect(banner.textContent).toContain("Description is required");
  });

  it("drives submit, a premature 409, two feedback rounds, and the ticket view", async () => {
    const { server, app, root } = setup();

    const done = app.submit("tuning sweep slows down, no errors anywhere", {
      feedbackRounds: 2,
    });
    await waitFor(() => app.sessionId === "S1", "session start");

    // feedback while the session is still Running: the 409 guard fires and
    // the console surfaces it without crashing
    const accepted = await app.sendFeedback("text", "too early");
    expect(accepted).toBe(false);
    expect(root.querySelector('[data-role="error-banner"]')!.textContent).toContain(
      "advanced in the meantime",
    );
    expect(server.feedback).toHaveLength(0);

    server.releaseInitialEvents();
    await waitFor(() => app.status === "awaiting_feedback", "first prompt");
    await waitFor(
      () => root.querySelector('[data-role="feedback-send"]') !== null,
      "feedback form",
    );

    const textarea = root.querySelector('[data-role="feedback-text"]') as HTMLTextAreaElement;
    textarea.value = "suggestion 1 did not help";
    (root.querySelector('[data-role="feedback-send"]') as HTMLButtonElement).click();

    await waitFor(() => app.model.pendingFeedback?.round === 2, "second prompt");
    expect(server.feedback[0]).toEqual({ action: "text", text: "suggestion 1 did not help" });
    expect(app.status).toBe("awaiting_feedback");

    (root.querySelector('[data-role="feedback-decline"]') as HTMLButtonElement).click();
    await done;

    expect(app.status).toBe("finished");
    expect(app.model.outcome?.status).toBe("escalated");
    const badge = root.querySelector('[data-role="status"]')!;
    expect(badge.getAttribute("data-status")).toBe("finished");

    // ticket view shows the tested-hypotheses table and the feedback text
    const rows = root.querySelectorAll('[data-role="ticket-hypotheses"] tr');
    expect(rows.length).toBe(2); // header + one hypothesis
    expect(rows[1].textContent).toContain("GPU.MEMORY.ECC Error");
    expect(rows[1].textContent).toContain("rejected");
    expect(root.querySelector(".ticket-feedback")!.textContent).toContain(
      "suggestion 1 did not help",
    );
  });

  it("renders confirmed leaves from a folded trace with clickable evidence", async () => {
    const { app, root } = setup();
    const lines = [
      line(1, "session_started", { incident_id: "X" }),
      line(2, "pipeline_started", { pipeline: 2 }),
      line(3, "node_entered", { pipeline: 2, path: "", memory: [] }),
      line(4, "evidence_collected", {
        pipeline: 2,
        path: "GPU.MEMORY.ECC Error",
        overall: "fail",
        results: [{ script_id: "ecc", outcome: "fail", digest: "abcdefabcdef" }],
        memory: [],
      }),
      line(5, "verdict", {
        pipeline: 2,
        path: "GPU.MEMORY.ECC Error",
        decision: "confirmed",
        rationale: "",
        cited_evidence: ["E1"],
        memory: [],
      }),
    ];
    app.loadTraceText(lines.join("\n"));
    const leaf = root.querySelector('[data-path="GPU.MEMORY.ECC Error"]')!;
    expect(leaf.getAttribute("data-status")).toBe("confirmed");
    (leaf.querySelector(".label") as HTMLElement).click();
    await waitFor(
      () => root.querySelector('[data-role="evidence"]') !== null,
      "evidence list",
    );
    expect(root.querySelector('[data-role="evidence"]')!.textContent).toContain("abcdefabcdef");
  });
});
