import { ApiClient } from "./api.js";
import { ConsoleApp } from "./app.js";
import { DomView } from "./view.js";

async function bootstrap(): Promise<void> {
  const api = new ApiClient("");
  const taxonomy = await api.getTaxonomy();

  const root = document.getElementById("app");
  const form = document.getElementById("submit-form") as HTMLFormElement;
  const description = document.getElementById("description") as HTMLTextAreaElement;
  const scenario = document.getElementById("scenario") as HTMLInputElement;
  const replay = document.getElementById("replay") as HTMLInputElement;
  const traceFile = document.getElementById("trace-file") as HTMLInputElement;
  if (!root || !form) throw new Error("console markup missing");

  let app: ConsoleApp | null = null;
  const view = new DomView(root, taxonomy, {
    onAccept: () => app?.sendFeedback("accept"),
    onDecline: () => app?.sendFeedback("decline"),
    onText: (text) => app?.sendFeedback("text", text),
  });
  app = new ConsoleApp(api, view);

  form.addEventListener("submit", (event) => {
    event.preventDefault();
    void app!.submit(description.value, {
      scenario: scenario.value || undefined,
      replay: replay.value || undefined,
    });
  });

  // offline replay of a saved trace file, for demos without a live session
  traceFile?.addEventListener("change", async () => {
    const file = traceFile.files?.[0];
    if (file) app!.loadTraceText(await file.text());
  });
}

void bootstrap();
