// Explorer state and the request discipline: slider moves are debounced into
// at most one in-flight generate request, and responses that arrive out of
// order are discarded by sequence number.

import { ApiClient, ChemoArm, GenerateResponse, TreatmentContext } from "./api.js";

export const DEBOUNCE_MS = 250;
export const DEFAULT_SEED = 1234;

export interface ExplorerState {
  cohortId: string;
  recordId: string;
  context: TreatmentContext;
  nSteps: number;
  seedLock: boolean; // keep noise fixed so changes reflect conditioning only
  seed: number;
  displayThreshold: number;
  last: GenerateResponse | null;
  pinned: GenerateResponse | null;
  error: string | null;
}

export function initialState(): ExplorerState {
  return {
    cohortId: "",
    recordId: "",
    context: { days_since_baseline: 180, chemo: "adjuvant_tmz", dose_scale: 1.0 },
    nSteps: 4,
    seedLock: true,
    seed: DEFAULT_SEED,
    displayThreshold: 10 / 255,
    last: null,
    pinned: null,
    error: null,
  };
}

export class RequestGate {
  private latest = 0;

  next(): number {
    return ++this.latest;
  }

  isCurrent(seq: number): boolean {
    return seq === this.latest;
  }
}

export class Debouncer {
  private timer: ReturnType<typeof setTimeout> | null = null;

  constructor(private delayMs: number) {}

  schedule(fn: () => void): void {
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = setTimeout(() => {
      this.timer = null;
      fn();
    }, this.delayMs);
  }

  cancel(): void {
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = null;
  }
}

export type StateListener = (state: ExplorerState) => void;

export class ExplorerController {
  readonly state: ExplorerState = initialState();
  private gate = new RequestGate();
  private debouncer: Debouncer;
  private listeners: StateListener[] = [];

  constructor(
    private api: ApiClient,
    debounceMs: number = DEBOUNCE_MS,
  ) {
    this.debouncer = new Debouncer(debounceMs);
  }

  onChange(listener: StateListener): void {
    this.listeners.push(listener);
  }

  private notify(): void {
    for (const l of this.listeners) l(this.state);
  }

  selectRecord(cohortId: string, recordId: string): void {
    this.state.cohortId = cohortId;
    this.state.recordId = recordId;
    this.state.last = null;
    this.state.pinned = null;
    this.notify();
    this.issueNow();
  }

  /** Slider/selector commit: debounced into one request for the final value. */
  commit(patch: Partial<TreatmentContext> & { nSteps?: number }): void {
    if (patch.days_since_baseline !== undefined) {
      this.state.context.days_since_baseline = patch.days_since_baseline;
    }
    if (patch.chemo !== undefined) this.state.context.chemo = patch.chemo;
    if (patch.dose_scale !== undefined) this.state.context.dose_scale = patch.dose_scale;
    if (patch.nSteps !== undefined) this.state.nSteps = patch.nSteps;
    this.notify();
    this.debouncer.schedule(() => this.issueNow());
  }

  setSeedLock(lock: boolean): void {
    this.state.seedLock = lock;
    this.notify();
  }

  pinCurrent(): void {
    this.state.pinned = this.state.last;
    this.notify();
  }

  /** Fire the generate request immediately (used by tests and selection). */
  issueNow(): Promise<void> {
    if (!this.state.recordId) return Promise.resolve();
    const seq = this.gate.next();
    const seed = this.state.seedLock
      ? this.state.seed
      : Math.floor(Math.random() * 2 ** 31);
    const req = {
      cohort_id: this.state.cohortId,
      record_id: this.state.recordId,
      context: { ...this.state.context },
      n_steps: this.state.nSteps,
      seed,
    };
    return this.api.generate(req).then(
      (resp) => {
        if (!this.gate.isCurrent(seq)) return; // stale response, discard
        this.state.last = resp;
        this.state.error = null;
        this.notify();
      },
      (err) => {
        if (!this.gate.isCurrent(seq)) return;
        this.state.error = err instanceof Error ? err.message : String(err);
        this.notify(); // state (sliders etc.) is preserved on failure
      },
    );
  }
}

export function chemoLabel(chemo: ChemoArm): string {
  switch (chemo) {
    case "none":
      return "no systemic therapy";
    case "adjuvant_tmz":
      return "adjuvant TMZ";
    case "rert_tmz":
      return "re-RT + TMZ";
  }
}
