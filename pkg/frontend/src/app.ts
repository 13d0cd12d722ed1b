import { ApiClient, ApiError, SubmitBody } from "./api.js";
import { applyEvent, emptyModel, foldTraceFile } from "./model.js";
import type { TraceViewModel } from "./types.js";
import type { SessionStatus, ViewAdapter } from "./view.js";

export interface SubmitOptions {
  scenario?: string;
  replay?: string;
  feedbackRounds?: number;
}

/** Session controller: submit, follow the event stream, answer feedback
 *  rounds, fetch the ticket on escalation. All state shown to the user is a
 *  fold over received trace events. */
export class ConsoleApp {
  sessionId: string | null = null;
  status: SessionStatus = "idle";
  model: TraceViewModel = emptyModel();

  constructor(
    private readonly api: ApiClient,
    private readonly view: ViewAdapter,
  ) {}

  /** Client-side validation happens before any request leaves the browser.
   *  Resolves when the session has finished and the ticket (if any) loaded. */
  async submit(description: string, options: SubmitOptions = {}): Promise<string | null> {
    if (!description.trim()) {
      this.view.validationError("Description is required.");
      return null;
    }
    const body: SubmitBody = { incident: { description } };
    if (options.scenario) body.scenario = options.scenario;
    if (options.replay) body.replay = options.replay;
    if (options.feedbackRounds !== undefined) body.feedback_rounds = options.feedbackRounds;

    let id: string;
    try {
      id = await this.api.submitIncident(body);
    } catch (error) {
      const hint = error instanceof ApiError ? error.message : String(error);
      this.view.errorBanner(`Could not start the session (retry is safe): ${hint}`);
      return null;
    }
    this.sessionId = id;
    this.model = emptyModel();
    this.view.sessionStarted(id);
    this.setStatus("running");
    await this.consume(id);
    return id;
  }

  private setStatus(status: SessionStatus): void {
    this.status = status;
    this.view.statusChanged(status);
  }

  private async consume(id: string): Promise<void> {
    for await (const event of this.api.streamTrace(id)) {
      applyEvent(this.model, event);
      if (event.type === "awaiting_feedback") this.setStatus("awaiting_feedback");
      if (event.type === "feedback") this.setStatus("running");
      if (event.type === "session_finished") this.setStatus("finished");
      this.view.modelChanged(this.model);
    }
    this.setStatus("finished");
    if (this.model.ticketAvailable) {
      this.view.ticketLoaded(await this.api.getTicket(id));
    }
  }

  /** 409 means the session advanced while the operator was typing; surface it
   *  and resynchronize instead of failing. */
  async sendFeedback(action: "accept" | "decline" | "text", text?: string): Promise<boolean> {
    if (!this.sessionId) return false;
    try {
      await this.api.postFeedback(this.sessionId, action, text);
      return true;
    } catch (error) {
      if (error instanceof ApiError && error.status === 409) {
        this.view.errorBanner(`The session advanced in the meantime (${error.code}).`);
        const view = await this.api.getSession(this.sessionId);
        this.setStatus(view.status);
        return false;
      }
      throw error;
    }
  }

  /** Offline demo: fold a saved trace file into the same view the live
   *  stream would have produced. */
  loadTraceText(text: string): void {
    this.model = foldTraceFile(text);
    this.sessionId = null;
    this.setStatus(this.model.finished ? "finished" : "idle");
    this.view.modelChanged(this.model);
  }
}
