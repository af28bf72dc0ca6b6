/**
 * Annotation session: the client-side state machine for one run.
 *
 * The session is the only component that talks to the service, and the only
 * loop mutation it ever performs is a label submission. Clicks accumulate
 * locally (with undo) until the user submits; a server rejection or a
 * network failure surfaces as an inline error without discarding them, and
 * `refresh`/`submit` can simply be called again.
 */

import {
  ApiError,
  type ImagePoint,
  type LabelAck,
  type Metrics,
  type WindowPayload,
} from "./api.js";
import { rectContains } from "./transform.js";

/** The slice of the service protocol a session needs. */
export interface LabelingClient {
  nextWindow(runId: string): Promise<WindowPayload | null>;
  submitLabels(
    runId: string,
    windowId: string,
    points: ImagePoint[],
  ): Promise<LabelAck>;
  metrics(runId: string): Promise<Metrics>;
}

export type SessionPhase =
  | "idle" // before the first fetch
  | "loading" // a request is in flight
  | "pending" // a window awaits labeling
  | "finished" // the run is complete
  | "connection_error"; // last request failed; retry keeps all state

export interface SessionState {
  phase: SessionPhase;
  window: WindowPayload | null;
  clicks: ImagePoint[];
  /** Inline message from a rejection or validation failure, if any. */
  error: string | null;
  /** Latest metrics snapshot (refreshed after each accepted label). */
  metrics: Metrics | null;
  /** Cumulative animals found per the last server acknowledgment. */
  found: number;
}

export class AnnotationSession {
  private phase: SessionPhase = "idle";
  private window: WindowPayload | null = null;
  private clicks: ImagePoint[] = [];
  private error: string | null = null;
  private metrics: Metrics | null = null;
  private found = 0;

  constructor(
    private readonly client: LabelingClient,
    readonly runId: string,
    private readonly onChange: (state: SessionState) => void = () => {},
  ) {}

  state(): SessionState {
    return {
      phase: this.phase,
      window: this.window,
      clicks: [...this.clicks],
      error: this.error,
      metrics: this.metrics,
      found: this.found,
    };
  }

  private emit(): void {
    this.onChange(this.state());
  }

  /** Fetch the pending window (or the final metrics once finished). */
  async refresh(): Promise<void> {
    this.phase = "loading";
    this.error = null;
    this.emit();
    try {
      const next = await this.client.nextWindow(this.runId);
      if (next === null) {
        this.window = null;
        this.clicks = [];
        this.metrics = await this.client.metrics(this.runId);
        this.found = this.metrics.cumulative_found;
        this.phase = "finished";
      } else {
        // keep clicks over a reconnect to the same window, drop them when
        // the server moved on
        if (this.window === null || this.window.window_id !== next.window_id) {
          this.clicks = [];
        }
        this.window = next;
        this.phase = "pending";
      }
    } catch (err) {
      this.phase = "connection_error";
      this.error = describeError(err);
    }
    this.emit();
  }

  /**
   * Record a click in image coordinates. Returns false (with an inline
   * error) for clicks outside the window or while no window is pending.
   */
  addClick(point: ImagePoint): boolean {
    if (this.phase !== "pending" || this.window === null) {
      this.error = "no window is awaiting labels";
      this.emit();
      return false;
    }
    if (!rectContains(this.window.rect, { x: point.px, y: point.py })) {
      this.error = "click is outside the window";
      this.emit();
      return false;
    }
    this.clicks.push({ px: point.px, py: point.py });
    this.error = null;
    this.emit();
    return true;
  }

  /** Remove the most recent click, if any. */
  undo(): void {
    if (this.clicks.length > 0) {
      this.clicks.pop();
      this.emit();
    }
  }

  /**
   * Submit the collected clicks (an empty list is a valid "no animals"
   * label) and advance to the next window on acceptance.
   */
  async submit(): Promise<void> {
    if (this.phase !== "pending" || this.window === null) {
      this.error = "no window is awaiting labels";
      this.emit();
      return;
    }
    const windowId = this.window.window_id;
    const points = [...this.clicks];
    this.phase = "loading";
    this.error = null;
    this.emit();
    try {
      const ack = await this.client.submitLabels(this.runId, windowId, points);
      this.found = ack.cumulative_found;
      this.clicks = [];
      this.window = null;
      try {
        this.metrics = await this.client.metrics(this.runId);
      } catch {
        // metrics refresh is cosmetic; the next one will catch up
      }
    } catch (err) {
      // rejected: restore the pending view, keep the user's clicks
      this.phase = "pending";
      this.error = describeError(err);
      this.emit();
      return;
    }
    await this.refresh();
  }
}

function describeError(err: unknown): string {
  if (err instanceof ApiError) return err.message;
  if (err instanceof Error) return `request failed: ${err.message}`;
  return `request failed: ${String(err)}`;
}
