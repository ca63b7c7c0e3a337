import { describe, expect, it, vi } from "vitest";

import type { ApiClient, ChemoArm, GridResponse } from "../src/api.js";
import { ExplorerController } from "../src/state.js";
import { buildPanels, renderGrid, renderViews } from "../src/views.js";
import { constantImageB64, encodeImageB64 } from "./helpers.js";

const SIZE = 4;
const CHEMO_AXIS: ChemoArm[] = ["none", "adjuvant_tmz", "rert_tmz"];
const DOSE_AXIS = [0.8, 1.0, 1.2];

function mockGrid(): GridResponse {
  const cells = [];
  for (const chemo of CHEMO_AXIS) {
    for (const dose of DOSE_AXIS) {
      const isCenter = chemo === "adjuvant_tmz" && dose === 1.0;
      cells.push({
        chemo,
        dose_scale: dose,
        image_b64: constantImageB64(SIZE, 3, 0.5),
        // center diff identically zero; others well above threshold
        diff_b64: constantImageB64(SIZE, 3, isCenter ? 0.0 : 0.3),
      });
    }
  }
  return {
    record_id: "p000",
    seed: 0,
    n_steps: 4,
    dose_axis: DOSE_AXIS,
    chemo_axis: CHEMO_AXIS,
    display_threshold: 10 / 255,
    reference_image_b64: constantImageB64(SIZE, 3, 0.5),
    cells,
  };
}

describe("renderGrid", () => {
  it("renders 9 cells with a marked reference and blank center overlay", () => {
    const container = document.createElement("div");
    const view = renderGrid(container, mockGrid(), "adjuvant_tmz", 1.0, () => {});
    expect(view.cells.length).toBe(9);

    const reference = view.cells.filter((c) => c.classList.contains("reference"));
    expect(reference.length).toBe(1);
    const overlay = reference[0]!.querySelector(".cell-overlay") as HTMLCanvasElement;
    expect(overlay.dataset.nonzero).toBe("false");

    const others = view.cells.filter((c) => !c.classList.contains("reference"));
    for (const cell of others) {
      const ov = cell.querySelector(".cell-overlay") as HTMLCanvasElement;
      expect(ov.dataset.nonzero).toBe("true");
    }
  });

  it("promotes a clicked cell's context into the sliders", () => {
    const container = document.createElement("div");
    const promoted: Array<[string, number]> = [];
    const view = renderGrid(container, mockGrid(), "adjuvant_tmz", 1.0,
      (chemo, dose) => promoted.push([chemo, dose]));
    view.cells[0]!.click();
    expect(promoted).toEqual([["none", 0.8]]);
  });

  it("shows an error panel instead of crashing on a corrupt cell", () => {
    const grid = mockGrid();
    grid.cells[3]!.image_b64 = "@@corrupt@@";
    const container = document.createElement("div");
    const view = renderGrid(container, grid, "adjuvant_tmz", 1.0, () => {});
    expect(view.cells.length).toBe(9);
    const bad = view.cells[3]!;
    expect(bad.classList.contains("decode-error")).toBe(true);
    expect(bad.querySelector(".error-panel")!.textContent).toBeTruthy();
  });
});

describe("renderViews", () => {
  function makeController() {
    return new ExplorerController({} as unknown as ApiClient);
  }

  it("renders a self-diff as a fully transparent overlay", () => {
    const container = document.createElement("div");
    const panels = buildPanels(container);
    const c = makeController();
    const pred = constantImageB64(SIZE, 3, 0.6);
    c.state.last = {
      record_id: "p000",
      seed: 1,
      n_steps: 4,
      timing_ms: 2,
      image_b64: pred,
      diff_vs_baseline_b64: constantImageB64(SIZE, 3, 0.0),
      metrics: { mse: 0, psnr: null, ssim: 1 },
    };
    // pinned result identical to the current one -> zero pinned diff
    c.state.pinned = { ...c.state.last };
    renderViews(panels, c.state, constantImageB64(SIZE, 3, 0.4),
      constantImageB64(SIZE, 1, 0.2));
    expect(panels.diff.dataset.nonzero).toBe("false");
    expect(panels.pinnedDiff.dataset.nonzero).toBe("false");
    expect(panels.errorPanel.hidden).toBe(true);
    expect(panels.metrics.textContent).toContain("ssim");
  });

  it("routes decode failures to the error panel without throwing", () => {
    const container = document.createElement("div");
    const panels = buildPanels(container);
    const c = makeController();
    c.state.last = {
      record_id: "p000",
      seed: 1,
      n_steps: 4,
      timing_ms: 2,
      image_b64: "@@broken@@",
      diff_vs_baseline_b64: constantImageB64(SIZE, 3, 0.0),
      metrics: { mse: 0, psnr: null, ssim: 1 },
    };
    renderViews(panels, c.state, null, null);
    expect(panels.errorPanel.hidden).toBe(false);
    expect(panels.errorPanel.textContent).toContain("decode failure");
  });

  it("shows the controller error banner", () => {
    const container = document.createElement("div");
    const panels = buildPanels(container);
    const c = makeController();
    c.state.error = "server unreachable";
    renderViews(panels, c.state, null, null);
    expect(panels.errorPanel.hidden).toBe(false);
    expect(panels.errorPanel.textContent).toBe("server unreachable");
  });

  it("renders a nonzero genuine diff overlay", () => {
    const container = document.createElement("div");
    const panels = buildPanels(container);
    const c = makeController();
    const diffData = new Float32Array(SIZE * SIZE * 3);
    diffData[0] = 0.4;
    diffData[30] = -0.4;
    c.state.last = {
      record_id: "p000",
      seed: 1,
      n_steps: 4,
      timing_ms: 2,
      image_b64: constantImageB64(SIZE, 3, 0.6),
      diff_vs_baseline_b64: encodeImageB64(SIZE, SIZE, 3, diffData),
      metrics: { mse: 0.1, psnr: 10, ssim: 0.5 },
    };
    renderViews(panels, c.state, null, null);
    expect(panels.diff.dataset.nonzero).toBe("true");
  });
});
