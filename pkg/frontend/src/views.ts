// DOM views: the four-panel explorer (baseline | dose | prediction | diff),
// the treatment sliders, and the 3x3 counterfactual grid. Rendering is
// deterministic given the state; all pixel data comes from the API.

import { ApiClient, GridResponse } from "./api.js";
import { DecodeError, decodeBase64Image, imageDiff } from "./decode.js";
import { diffRGBA, doseRGBA, grayRGBA, paint } from "./render.js";
import { ExplorerController, ExplorerState, chemoLabel } from "./state.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function panel(title: string): { root: HTMLDivElement; canvas: HTMLCanvasElement } {
  const root = el("div", "panel");
  root.appendChild(el("h3", "panel-title", title));
  const canvas = el("canvas", "panel-canvas");
  root.appendChild(canvas);
  return { root, canvas };
}

export interface ViewPanels {
  root: HTMLElement;
  baseline: HTMLCanvasElement;
  dose: HTMLCanvasElement;
  prediction: HTMLCanvasElement;
  diff: HTMLCanvasElement;
  pinnedDiff: HTMLCanvasElement;
  errorPanel: HTMLElement;
  metrics: HTMLElement;
}

export function buildPanels(container: HTMLElement): ViewPanels {
  const root = el("div", "panels");
  const b = panel("baseline");
  const d = panel("dose");
  const p = panel("prediction");
  const f = panel("diff vs baseline");
  const pin = panel("pinned vs current");
  for (const x of [b, d, p, f, pin]) root.appendChild(x.root);
  const errorPanel = el("div", "error-panel");
  errorPanel.hidden = true;
  const metrics = el("div", "metrics-readout");
  root.appendChild(errorPanel);
  root.appendChild(metrics);
  container.appendChild(root);
  return {
    root,
    baseline: b.canvas,
    dose: d.canvas,
    prediction: p.canvas,
    diff: f.canvas,
    pinnedDiff: pin.canvas,
    errorPanel,
    metrics,
  };
}

/** Render every panel from the state; decode failures go to the error panel. */
export function renderViews(
  panels: ViewPanels,
  state: ExplorerState,
  baselineB64: string | null,
  doseB64: string | null,
): void {
  try {
    if (baselineB64) {
      const img = decodeBase64Image(baselineB64);
      paint(panels.baseline, grayRGBA(img), img.width, img.height);
    }
    if (doseB64) {
      const img = decodeBase64Image(doseB64);
      paint(panels.dose, doseRGBA(img), img.width, img.height);
    }
    if (state.last) {
      const pred = decodeBase64Image(state.last.image_b64);
      paint(panels.prediction, grayRGBA(pred), pred.width, pred.height);
      const diff = decodeBase64Image(state.last.diff_vs_baseline_b64);
      paint(panels.diff, diffRGBA(diff, state.displayThreshold), diff.width, diff.height);
      if (state.pinned) {
        const pinned = decodeBase64Image(state.pinned.image_b64);
        const d = imageDiff(pred, pinned);
        paint(panels.pinnedDiff, diffRGBA(d, state.displayThreshold), d.width, d.height);
      }
      const m = state.last.metrics;
      panels.metrics.textContent =
        `mse ${m.mse.toExponential(2)} | ssim ${m.ssim.toFixed(3)} | ` +
        `psnr ${m.psnr === null ? "inf" : m.psnr.toFixed(1)} dB | ` +
        `${state.last.timing_ms.toFixed(0)} ms @ ${state.last.n_steps} steps`;
    }
    panels.errorPanel.hidden = state.error === null;
    panels.errorPanel.textContent = state.error ?? "";
  } catch (err) {
    panels.errorPanel.hidden = false;
    panels.errorPanel.textContent =
      err instanceof DecodeError ? `decode failure: ${err.message}` : String(err);
  }
}

export interface SliderBlock {
  root: HTMLElement;
  day: HTMLInputElement;
  doseScale: HTMLInputElement;
  chemo: HTMLSelectElement;
  threshold: HTMLInputElement;
  seedLock: HTMLInputElement;
  pin: HTMLButtonElement;
  retry: HTMLButtonElement;
}

export function buildSliders(
  container: HTMLElement,
  controller: ExplorerController,
): SliderBlock {
  const root = el("div", "controls");

  const day = el("input");
  day.type = "range";
  day.min = "0";
  day.max = "720";
  day.step = "10";
  day.value = String(controller.state.context.days_since_baseline);
  const dayLabel = el("label", "control-label", "days since baseline");
  day.addEventListener("input", () => {
    controller.commit({ days_since_baseline: Number(day.value) });
  });

  const doseScale = el("input");
  doseScale.type = "range";
  doseScale.min = "0.5";
  doseScale.max = "1.5";
  doseScale.step = "0.05";
  doseScale.value = String(controller.state.context.dose_scale);
  const doseLabel = el("label", "control-label", "dose scale");
  doseScale.addEventListener("input", () => {
    controller.commit({ dose_scale: Number(doseScale.value) });
  });

  const chemo = el("select");
  for (const arm of ["none", "adjuvant_tmz", "rert_tmz"] as const) {
    const opt = el("option", undefined, chemoLabel(arm));
    opt.value = arm;
    chemo.appendChild(opt);
  }
  chemo.value = controller.state.context.chemo;
  chemo.addEventListener("change", () => {
    controller.commit({ chemo: chemo.value as "none" | "adjuvant_tmz" | "rert_tmz" });
  });

  const threshold = el("input");
  threshold.type = "range";
  threshold.min = "0";
  threshold.max = "0.2";
  threshold.step = "0.005";
  threshold.value = String(controller.state.displayThreshold);

  const seedLock = el("input");
  seedLock.type = "checkbox";
  seedLock.checked = controller.state.seedLock;
  seedLock.addEventListener("change", () => controller.setSeedLock(seedLock.checked));

  const pin = el("button", "pin-button", "pin for comparison");
  pin.addEventListener("click", () => controller.pinCurrent());

  const retry = el("button", "retry-button", "retry");
  retry.addEventListener("click", () => void controller.issueNow());

  root.append(dayLabel, day, doseLabel, doseScale, chemo,
              el("label", "control-label", "diff threshold"), threshold,
              el("label", "control-label", "seed lock"), seedLock, pin, retry);
  container.appendChild(root);
  return { root, day, doseScale, chemo, threshold, seedLock, pin, retry };
}

export interface GridView {
  root: HTMLElement;
  cells: HTMLElement[];
}

/**
 * Render the 3x3 counterfactual panel. Every cell overlays its difference
 * against the reference image; the cell matching the reference context is
 * visibly marked and its overlay stays blank. Clicking a cell promotes that
 * cell's context into the main sliders via `onPromote`.
 */
export function renderGrid(
  container: HTMLElement,
  grid: GridResponse,
  referenceChemo: string,
  referenceDose: number,
  onPromote: (chemo: string, doseScale: number) => void,
): GridView {
  container.textContent = "";
  const root = el("div", "grid-view");
  const cells: HTMLElement[] = [];
  grid.cells.forEach((cell) => {
    const box = el("div", "grid-cell");
    const isReference =
      cell.chemo === referenceChemo && cell.dose_scale === referenceDose;
    if (isReference) box.classList.add("reference");
    const base = el("canvas", "cell-image");
    const overlay = el("canvas", "cell-overlay");
    try {
      const img = decodeBase64Image(cell.image_b64);
      paint(base, grayRGBA(img), img.width, img.height);
      const diff = decodeBase64Image(cell.diff_b64);
      paint(overlay, diffRGBA(diff, grid.display_threshold), diff.width, diff.height);
    } catch (err) {
      box.classList.add("decode-error");
      box.appendChild(el("div", "error-panel",
        err instanceof Error ? err.message : String(err)));
    }
    box.appendChild(base);
    box.appendChild(overlay);
    box.appendChild(el("div", "cell-caption",
      `${chemoLabel(cell.chemo)} / ${cell.dose_scale.toFixed(1)}x`));
    box.addEventListener("click", () => onPromote(cell.chemo, cell.dose_scale));
    root.appendChild(box);
    cells.push(box);
  });
  container.appendChild(root);
  return { root, cells };
}

export async function loadGrid(
  api: ApiClient,
  controller: ExplorerController,
  container: HTMLElement,
): Promise<GridView> {
  const state = controller.state;
  const grid = await api.grid({
    cohort_id: state.cohortId,
    record_id: state.recordId,
    context: { ...state.context },
    n_steps: state.nSteps,
    seed: state.seed,
  });
  return renderGrid(container, grid, state.context.chemo, state.context.dose_scale,
    (chemo, doseScale) => {
      controller.commit({ chemo: chemo as "none" | "adjuvant_tmz" | "rert_tmz",
                          dose_scale: doseScale });
    });
}
