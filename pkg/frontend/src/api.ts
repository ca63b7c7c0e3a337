// Typed client for the flowup HTTP API. The UI never computes model math:
// every pixel it shows is decoded from a server payload.

export type ChemoArm = "none" | "adjuvant_tmz" | "rert_tmz";

export interface TreatmentContext {
  days_since_baseline: number;
  chemo: ChemoArm;
  dose_scale: number;
}

export interface GenerateRequest {
  cohort_id: string;
  record_id: string;
  context: TreatmentContext;
  n_steps: number;
  seed: number | null;
}

export interface GenerateResponse {
  record_id: string;
  seed: number;
  n_steps: number;
  timing_ms: number;
  image_b64: string;
  diff_vs_baseline_b64: string;
  metrics: { mse: number; psnr: number | null; ssim: number };
}

export interface GridCell {
  chemo: ChemoArm;
  dose_scale: number;
  image_b64: string;
  diff_b64: string;
}

export interface GridResponse {
  record_id: string;
  seed: number;
  n_steps: number;
  dose_axis: number[];
  chemo_axis: ChemoArm[];
  display_threshold: number;
  reference_image_b64: string;
  cells: GridCell[];
}

export interface CohortRecord {
  id: string;
  slice_label: string;
  followup_days: number[];
  size: number;
}

export interface CohortInfo {
  cohort_id: string;
  records: CohortRecord[];
}

export interface ModelInfo {
  config: Record<string, unknown>;
  config_hash: string;
  conditioning: { use_dose: boolean; use_chemo: boolean };
}

export class ApiError extends Error {
  constructor(public status: number, public code: string, message: string) {
    super(message);
  }
}

async function check<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let code = `http_${resp.status}`;
    let message = resp.statusText;
    try {
      const body = await resp.json();
      if (body && body.detail) {
        code = body.detail.code ?? code;
        message = body.detail.message ?? JSON.stringify(body.detail);
      }
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ApiError(resp.status, code, message);
  }
  return resp.json() as Promise<T>;
}

export class ApiClient {
  constructor(private base: string = "") {}

  getModel(): Promise<ModelInfo> {
    return fetch(`${this.base}/api/model`).then((r) => check<ModelInfo>(r));
  }

  getCohort(): Promise<CohortInfo> {
    return fetch(`${this.base}/api/cohort`).then((r) => check<CohortInfo>(r));
  }

  getBaseline(recordId: string): Promise<{ image_b64: string }> {
    return fetch(`${this.base}/api/cohort/${recordId}/baseline`).then((r) =>
      check<{ image_b64: string }>(r),
    );
  }

  getDose(recordId: string): Promise<{ image_b64: string }> {
    return fetch(`${this.base}/api/cohort/${recordId}/dose`).then((r) =>
      check<{ image_b64: string }>(r),
    );
  }

  generate(req: GenerateRequest): Promise<GenerateResponse> {
    return fetch(`${this.base}/api/generate`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(req),
    }).then((r) => check<GenerateResponse>(r));
  }

  grid(req: GenerateRequest): Promise<GridResponse> {
    return fetch(`${this.base}/api/counterfactual/grid`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(req),
    }).then((r) => check<GridResponse>(r));
  }
}
