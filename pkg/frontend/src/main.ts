// Explorer bootstrap: wire the API client, state controller, and views.

import { ApiClient } from "./api.js";
import { ExplorerController } from "./state.js";
import { buildPanels, buildSliders, loadGrid, renderViews } from "./views.js";

async function boot(): Promise<void> {
  const app = document.getElementById("app");
  if (!app) throw new Error("missing #app container");

  const api = new ApiClient("");
  const controller = new ExplorerController(api);

  const header = document.createElement("div");
  header.className = "header";
  const recordSelect = document.createElement("select");
  recordSelect.className = "record-select";
  header.appendChild(recordSelect);
  const gridButton = document.createElement("button");
  gridButton.textContent = "3x3 treatment grid";
  header.appendChild(gridButton);
  app.appendChild(header);

  const panels = buildPanels(app);
  buildSliders(app, controller);
  const gridContainer = document.createElement("div");
  gridContainer.className = "grid-container";
  app.appendChild(gridContainer);

  let baselineB64: string | null = null;
  let doseB64: string | null = null;

  controller.onChange((state) => renderViews(panels, state, baselineB64, doseB64));

  const cohort = await api.getCohort();
  for (const rec of cohort.records) {
    const opt = document.createElement("option");
    opt.value = rec.id;
    opt.textContent = `${rec.id} (${rec.slice_label})`;
    recordSelect.appendChild(opt);
  }

  async function selectRecord(recordId: string): Promise<void> {
    const [base, dose] = await Promise.all([
      api.getBaseline(recordId),
      api.getDose(recordId),
    ]);
    baselineB64 = base.image_b64;
    doseB64 = dose.image_b64;
    controller.selectRecord(cohort.cohort_id, recordId);
  }

  recordSelect.addEventListener("change", () => void selectRecord(recordSelect.value));
  gridButton.addEventListener("click", () => {
    void loadGrid(api, controller, gridContainer);
  });

  if (cohort.records.length > 0) {
    await selectRecord(cohort.records[0]!.id);
  }
}

void boot();
