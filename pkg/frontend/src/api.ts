import { parseTraceLine } from "./model.js";
import type { SessionView, TaxonomyDoc, TraceEvent } from "./types.js";

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

export interface SubmitBody {
  incident: { description: string; id?: string };
  scenario?: string;
  replay?: string;
  feedback_rounds?: number;
}

type FetchFn = (url: string, init?: RequestInit) => Promise<Response>;

async function raiseForStatus(response: Response): Promise<void> {
  if (response.ok) return;
  let code = "http_error";
  let message = response.statusText;
  try {
    const body = await response.json();
    if (body?.error) {
      code = body.error.code ?? code;
      message = body.error.message ?? message;
    }
  } catch {
    /* non-JSON error body */
  }
  throw new ApiError(response.status, code, message);
}

/** Thin client over the public session API; the console uses nothing else. */
export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchFn = (url, init) => fetch(url, init),
  ) {}

  private url(path: string): string {
    return `${this.baseUrl}${path}`;
  }

  async submitIncident(body: SubmitBody): Promise<string> {
    const response = await this.fetchFn(this.url("/sessions"), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    await raiseForStatus(response);
    return (await response.json()).id;
  }

  async getSession(id: string): Promise<SessionView> {
    const response = await this.fetchFn(this.url(`/sessions/${id}`));
    await raiseForStatus(response);
    return response.json();
  }

  async postFeedback(id: string, action: "accept" | "decline" | "text", text?: string): Promise<void> {
    const response = await this.fetchFn(this.url(`/sessions/${id}/feedback`), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(text === undefined ? { action } : { action, text }),
    });
    await raiseForStatus(response);
  }

  async getTicket(id: string): Promise<any> {
    const response = await this.fetchFn(this.url(`/sessions/${id}/ticket`));
    await raiseForStatus(response);
    return response.json();
  }

  async getTaxonomy(): Promise<TaxonomyDoc> {
    const response = await this.fetchFn(this.url("/taxonomy"));
    await raiseForStatus(response);
    return response.json();
  }

  /**
   * Consume the NDJSON trace stream. Dropped connections reconnect with the
   * cursor of the last delivered event; heartbeat comment lines are skipped.
   * Ends once the session reports finished and the cursor has caught up.
   */
  async *streamTrace(id: string, cursor = 0): AsyncGenerator<TraceEvent> {
    for (;;) {
      const response = await this.fetchFn(
        this.url(`/sessions/${id}/trace?cursor=${cursor}&stream=1`),
      );
      await raiseForStatus(response);
      const body = response.body;
      if (body) {
        const reader = body.getReader();
        const decoder = new TextDecoder();
        let buffer = "";
        for (;;) {
          const { done, value } = await reader.read();
          if (done) break;
          buffer += decoder.decode(value, { stream: true });
          const lines = buffer.split("\n");
          buffer = lines.pop() ?? "";
          for (const line of lines) {
            const event = parseTraceLine(line);
            if (event) {
              cursor += 1;
              yield event;
            }
          }
        }
        const tail = parseTraceLine(buffer);
        if (tail) {
          cursor += 1;
          yield tail;
        }
      } else {
        // environments without streaming bodies deliver the whole text at once
        for (const line of (await response.text()).split("\n")) {
          const event = parseTraceLine(line);
          if (event) {
            cursor += 1;
            yield event;
          }
        }
      }
      const view = await this.getSession(id);
      if (view.status === "finished" && cursor >= view.trace_cursor) return;
    }
  }
}
