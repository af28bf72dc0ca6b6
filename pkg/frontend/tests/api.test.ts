import { describe, expect, it } from "vitest";

import {
  ApiError,
  decodeMetrics,
  decodeWindowPayload,
  ServiceClient,
} from "../src/api.js";

type Call = { url: string; init: RequestInit | undefined };

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

function clientWith(
  responses: Response[],
): { client: ServiceClient; calls: Call[] } {
  const calls: Call[] = [];
  const impl = async (url: string, init?: RequestInit) => {
    calls.push({ url, init });
    const next = responses.shift();
    if (!next) throw new Error("unexpected extra request");
    return next;
  };
  return { client: new ServiceClient("http://svc:1234/", impl), calls };
}

const WINDOW_BODY = {
  window_id: "w001q001",
  image_id: "tgt_0002",
  rect: { r_x: 10, r_y: 20, r_w: 500, r_h: 400 },
  candidate_markers: [{ px: 30, py: 40, confidence: 0.75 }],
  prior_rects: [{ r_x: 0, r_y: 0, r_w: 100, r_h: 100 }],
  iteration: 1,
  query_index: 1,
};

describe("ServiceClient", () => {
  it("creates runs and strips trailing slashes from the base url", async () => {
    const { client, calls } = clientWith([jsonResponse({ run_id: "run-0001" })]);
    const id = await client.createRun({ criterion: "random", seed: 3 });
    expect(id).toBe("run-0001");
    expect(calls[0]!.url).toBe("http://svc:1234/runs");
    expect(calls[0]!.init?.method).toBe("POST");
    expect(JSON.parse(calls[0]!.init?.body as string)).toEqual({
      criterion: "random",
      seed: 3,
    });
  });

  it("decodes a pending window", async () => {
    const { client } = clientWith([jsonResponse(WINDOW_BODY)]);
    const win = await client.nextWindow("run-0001");
    expect(win?.window_id).toBe("w001q001");
    expect(win?.rect).toEqual({ r_x: 10, r_y: 20, r_w: 500, r_h: 400 });
    expect(win?.candidate_markers).toHaveLength(1);
  });

  it("maps 204 to null (run finished)", async () => {
    const { client } = clientWith([new Response(null, { status: 204 })]);
    expect(await client.nextWindow("run-0001")).toBeNull();
  });

  it("posts labels with the protocol field names", async () => {
    const { client, calls } = clientWith([
      jsonResponse({ accepted: true, cumulative_found: 4 }),
    ]);
    const ack = await client.submitLabels("run-0001", "w001q001", [
      { px: 1.5, py: 2.5 },
    ]);
    expect(ack).toEqual({ accepted: true, cumulative_found: 4 });
    expect(calls[0]!.url).toBe("http://svc:1234/runs/run-0001/label");
    expect(JSON.parse(calls[0]!.init?.body as string)).toEqual({
      window_id: "w001q001",
      animal_points: [{ px: 1.5, py: 2.5 }],
    });
  });

  it("raises ApiError with the server's detail on conflict", async () => {
    const { client } = clientWith([
      jsonResponse({ detail: "window 'x' is not awaiting a label" }, 409),
    ]);
    const err = await client
      .submitLabels("run-0001", "x", [])
      .catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(409);
    expect((err as ApiError).message).toMatch(/not awaiting/);
  });

  it("survives non-JSON error bodies", async () => {
    const { client } = clientWith([
      new Response("Bad Gateway", { status: 502, statusText: "Bad Gateway" }),
    ]);
    const err = await client.metrics("run-0001").catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(502);
  });
});

describe("response validation", () => {
  it("accepts a full metrics payload", () => {
    const metrics = decodeMetrics({
      status: "finished",
      cumulative_found: 7,
      total_animals: 9,
      total_queries: 8,
      capacity: 12,
      rows: [
        {
          iteration: 1,
          queries: 4,
          cumulative_found: 7,
          recall: 0.7777,
          fraction_reviewed: 0.333,
        },
      ],
      csv: "iteration,queries,cumulative_found,recall,fraction_reviewed\n1,4,7,0.7777,0.333\n",
    });
    expect(metrics.rows[0]!.recall).toBeCloseTo(0.7777);
  });

  it("rejects windows with missing or mistyped fields", () => {
    expect(() => decodeWindowPayload({})).toThrow(/malformed/);
    expect(() =>
      decodeWindowPayload({ ...WINDOW_BODY, rect: { r_x: 1, r_y: 2, r_w: 3 } }),
    ).toThrow(/rect/);
    expect(() =>
      decodeWindowPayload({ ...WINDOW_BODY, candidate_markers: [{ px: "a" }] }),
    ).toThrow(/px/);
    expect(() => decodeMetrics({ status: "ready" })).toThrow(/metrics/);
  });
});
