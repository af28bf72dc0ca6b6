/**
 * Typed client for the labeling service's HTTP protocol.
 *
 * Every response is validated structurally before it reaches the rest of the
 * client, so a protocol drift fails loudly at the boundary instead of as an
 * undefined somewhere in the UI. The fetch implementation is injectable for
 * tests.
 */

export interface Rect {
  r_x: number;
  r_y: number;
  r_w: number;
  r_h: number;
}

export interface Marker {
  px: number;
  py: number;
  confidence: number;
}

export interface WindowPayload {
  window_id: string;
  image_id: string;
  rect: Rect;
  candidate_markers: Marker[];
  prior_rects: Rect[];
  iteration: number;
  query_index: number;
}

export interface MetricRow {
  iteration: number;
  queries: number;
  cumulative_found: number;
  recall: number;
  fraction_reviewed: number;
}

export interface Metrics {
  status: string;
  cumulative_found: number;
  total_animals: number;
  total_queries: number;
  capacity: number;
  rows: MetricRow[];
  csv: string;
}

export interface LabelAck {
  accepted: boolean;
  cumulative_found: number;
}

/** Loop parameters accepted by POST /runs; all fields optional server-side. */
export interface RunConfig {
  criterion?: string;
  mode?: string;
  iterations?: number;
  queries_per_iteration?: number;
  window_w?: number;
  window_h?: number;
  threshold?: number;
  nms_radius?: number;
  crop_stride?: number;
  crop_lambda?: number;
  ot_solver?: string;
  seed?: number;
}

export interface ImagePoint {
  px: number;
  py: number;
}

/** Server answered with a non-2xx status; `detail` is its explanation. */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
    this.name = "ApiError";
  }
}

// ---------------------------------------------------------------------------
// Structural validation
// ---------------------------------------------------------------------------

function fail(context: string, value: unknown): never {
  throw new Error(`malformed server response (${context}): ${JSON.stringify(value)}`);
}

function asRecord(value: unknown, context: string): Record<string, unknown> {
  if (typeof value !== "object" || value === null || Array.isArray(value)) {
    fail(context, value);
  }
  return value as Record<string, unknown>;
}

function num(obj: Record<string, unknown>, key: string, context: string): number {
  const v = obj[key];
  if (typeof v !== "number" || Number.isNaN(v)) fail(`${context}.${key}`, v);
  return v;
}

function str(obj: Record<string, unknown>, key: string, context: string): string {
  const v = obj[key];
  if (typeof v !== "string") fail(`${context}.${key}`, v);
  return v;
}

function arr(obj: Record<string, unknown>, key: string, context: string): unknown[] {
  const v = obj[key];
  if (!Array.isArray(v)) fail(`${context}.${key}`, v);
  return v;
}

function decodeRect(value: unknown, context: string): Rect {
  const o = asRecord(value, context);
  return {
    r_x: num(o, "r_x", context),
    r_y: num(o, "r_y", context),
    r_w: num(o, "r_w", context),
    r_h: num(o, "r_h", context),
  };
}

export function decodeWindowPayload(value: unknown): WindowPayload {
  const o = asRecord(value, "window");
  return {
    window_id: str(o, "window_id", "window"),
    image_id: str(o, "image_id", "window"),
    rect: decodeRect(o["rect"], "window.rect"),
    candidate_markers: arr(o, "candidate_markers", "window").map((m, i) => {
      const mo = asRecord(m, `window.candidate_markers[${i}]`);
      return {
        px: num(mo, "px", "marker"),
        py: num(mo, "py", "marker"),
        confidence: num(mo, "confidence", "marker"),
      };
    }),
    prior_rects: arr(o, "prior_rects", "window").map((r, i) =>
      decodeRect(r, `window.prior_rects[${i}]`),
    ),
    iteration: num(o, "iteration", "window"),
    query_index: num(o, "query_index", "window"),
  };
}

export function decodeMetrics(value: unknown): Metrics {
  const o = asRecord(value, "metrics");
  return {
    status: str(o, "status", "metrics"),
    cumulative_found: num(o, "cumulative_found", "metrics"),
    total_animals: num(o, "total_animals", "metrics"),
    total_queries: num(o, "total_queries", "metrics"),
    capacity: num(o, "capacity", "metrics"),
    rows: arr(o, "rows", "metrics").map((r, i) => {
      const ro = asRecord(r, `metrics.rows[${i}]`);
      return {
        iteration: num(ro, "iteration", "row"),
        queries: num(ro, "queries", "row"),
        cumulative_found: num(ro, "cumulative_found", "row"),
        recall: num(ro, "recall", "row"),
        fraction_reviewed: num(ro, "fraction_reviewed", "row"),
      };
    }),
    csv: str(o, "csv", "metrics"),
  };
}

// ---------------------------------------------------------------------------
// Client
// ---------------------------------------------------------------------------

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ServiceClient {
  private readonly doFetch: FetchLike;

  constructor(
    readonly baseUrl: string,
    fetchImpl?: FetchLike,
  ) {
    const impl = fetchImpl ?? fetch;
    // global fetch must not be invoked as a method of this client
    this.doFetch = (input, init) => impl.call(globalThis, input, init);
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const resp = await this.doFetch(`${this.baseUrl}${path}`, init);
    if (resp.ok || resp.status === 204) return resp;
    let detail = resp.statusText;
    try {
      const body = (await resp.json()) as { detail?: unknown };
      if (body && body.detail !== undefined) detail = JSON.stringify(body.detail);
    } catch {
      // non-JSON error body: keep the status text
    }
    throw new ApiError(resp.status, detail);
  }

  private post(path: string, body: unknown): Promise<Response> {
    return this.request(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  async createRun(config: RunConfig): Promise<string> {
    const resp = await this.post("/runs", config);
    const o = asRecord(await resp.json(), "create");
    return str(o, "run_id", "create");
  }

  /** The pending window, or null once the run has finished (HTTP 204). */
  async nextWindow(runId: string): Promise<WindowPayload | null> {
    const resp = await this.request(`/runs/${runId}/next`);
    if (resp.status === 204) return null;
    return decodeWindowPayload(await resp.json());
  }

  async submitLabels(
    runId: string,
    windowId: string,
    points: ImagePoint[],
  ): Promise<LabelAck> {
    const resp = await this.post(`/runs/${runId}/label`, {
      window_id: windowId,
      animal_points: points,
    });
    const o = asRecord(await resp.json(), "label");
    return {
      accepted: o["accepted"] === true,
      cumulative_found: num(o, "cumulative_found", "label"),
    };
  }

  async metrics(runId: string): Promise<Metrics> {
    const resp = await this.request(`/runs/${runId}/metrics`);
    return decodeMetrics(await resp.json());
  }
}
