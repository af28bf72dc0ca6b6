/**
 * Page wiring: connects the annotation session to the DOM.
 *
 * The page has three zones: a start form (run configuration), the annotation
 * canvas with its toolbar, and the live recall curve. The service origin
 * comes from the `api` query parameter and defaults to the page's origin.
 */

import { ServiceClient, type RunConfig } from "./api.js";
import { renderCurveSvg, renderWindowSvg, statusLine } from "./render.js";
import { AnnotationSession, type SessionState } from "./session.js";
import { fitRect, type ViewTransform } from "./transform.js";

const VIEW_W = 720;
const VIEW_H = 720;
const MARGIN = 16;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function apiBase(): string {
  const param = new URLSearchParams(window.location.search).get("api");
  return param ?? window.location.origin;
}

function readConfig(): RunConfig {
  const pick = (id: string) => (el<HTMLInputElement>(id)).value;
  return {
    criterion: pick("criterion"),
    mode: pick("mode"),
    iterations: Number(pick("iterations")),
    queries_per_iteration: Number(pick("queries")),
    seed: Number(pick("seed")),
  };
}

function main(): void {
  const client = new ServiceClient(apiBase());
  let session: AnnotationSession | null = null;
  let transform: ViewTransform | null = null;

  const canvas = el<HTMLDivElement>("canvas");
  const status = el<HTMLDivElement>("status");
  const errorBox = el<HTMLDivElement>("error");
  const curve = el<HTMLDivElement>("curve");
  const finished = el<HTMLDivElement>("finished");
  const startForm = el<HTMLDivElement>("start-form");
  const toolbar = el<HTMLDivElement>("toolbar");

  function render(state: SessionState): void {
    errorBox.textContent = state.error ?? "";
    errorBox.style.display = state.error ? "block" : "none";
    el<HTMLButtonElement>("retry").style.display =
      state.phase === "connection_error" ? "inline-block" : "none";

    status.textContent =
      state.phase === "loading"
        ? "waiting for the server…"
        : statusLine(state.window, state.found);

    if (state.phase === "pending" && state.window) {
      transform = fitRect(state.window.rect, VIEW_W, VIEW_H, MARGIN);
      canvas.innerHTML = renderWindowSvg(
        state.window,
        transform,
        state.clicks,
        VIEW_W,
        VIEW_H,
      );
      toolbar.style.display = "block";
      finished.style.display = "none";
      el<HTMLButtonElement>("undo").disabled = state.clicks.length === 0;
      el<HTMLButtonElement>("submit").textContent =
        state.clicks.length === 0
          ? "submit: no animals"
          : `submit ${state.clicks.length} animal${state.clicks.length > 1 ? "s" : ""}`;
    }

    if (state.metrics) {
      curve.innerHTML = renderCurveSvg(state.metrics.rows, 360, 220);
    }

    if (state.phase === "finished" && state.metrics) {
      toolbar.style.display = "none";
      canvas.innerHTML = "";
      const m = state.metrics;
      const recall = m.total_animals
        ? (m.cumulative_found / m.total_animals).toFixed(3)
        : "n/a";
      el<HTMLSpanElement>("final-summary").textContent =
        `${m.cumulative_found} of ${m.total_animals} animals found ` +
        `(recall ${recall}) in ${m.total_queries} windows`;
      const link = el<HTMLAnchorElement>("csv-link");
      link.href = `data:text/csv;charset=utf-8,${encodeURIComponent(m.csv)}`;
      finished.style.display = "block";
    }
  }

  el<HTMLButtonElement>("start").addEventListener("click", async () => {
    try {
      const runId = await client.createRun(readConfig());
      session = new AnnotationSession(client, runId, render);
      startForm.style.display = "none";
      await session.refresh();
    } catch (err) {
      errorBox.textContent = err instanceof Error ? err.message : String(err);
      errorBox.style.display = "block";
    }
  });

  canvas.addEventListener("click", (ev: MouseEvent) => {
    if (!session || !transform) return;
    const svg = canvas.querySelector("svg");
    if (!svg) return;
    const box = svg.getBoundingClientRect();
    const img = transform.toImage({
      x: ev.clientX - box.left,
      y: ev.clientY - box.top,
    });
    session.addClick({ px: img.x, py: img.y });
  });

  el<HTMLButtonElement>("undo").addEventListener("click", () => session?.undo());
  el<HTMLButtonElement>("submit").addEventListener("click", () => {
    void session?.submit();
  });
  el<HTMLButtonElement>("retry").addEventListener("click", () => {
    void session?.refresh();
  });
}

main();
