/**
 * Schematic SVG rendering of the queried window.
 *
 * The datasets carry no imagery, so the view is a neutral canvas showing
 * exactly the geometry the server sent: the window bounds, candidate markers
 * (size and opacity follow detector confidence), outlines of previously
 * queried windows, and the user's click marks. All functions return markup
 * strings, which keeps them independent of the DOM and directly testable.
 */

import type { MetricRow, WindowPayload } from "./api.js";
import type { Point, ViewTransform } from "./transform.js";
import type { ImagePoint } from "./api.js";

function esc(value: string): string {
  return value
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function fmt(v: number): string {
  return Number(v.toFixed(2)).toString();
}

export function renderWindowSvg(
  win: WindowPayload,
  t: ViewTransform,
  clicks: ImagePoint[],
  viewW: number,
  viewH: number,
): string {
  const parts: string[] = [];
  parts.push(
    `<svg xmlns="http://www.w3.org/2000/svg" width="${viewW}" height="${viewH}" ` +
      `viewBox="0 0 ${viewW} ${viewH}" data-window-id="${esc(win.window_id)}">`,
  );
  parts.push(`<rect x="0" y="0" width="${viewW}" height="${viewH}" fill="#e8e4da"/>`);

  // the window itself
  const o = t.toView({ x: win.rect.r_x, y: win.rect.r_y });
  const w = win.rect.r_w * t.scale;
  const h = win.rect.r_h * t.scale;
  parts.push(
    `<rect class="window" x="${fmt(o.x)}" y="${fmt(o.y)}" width="${fmt(w)}" ` +
      `height="${fmt(h)}" fill="#fbfaf7" stroke="#49443b" stroke-width="2"/>`,
  );

  // previously queried windows, as dashed outlines
  for (const prev of win.prior_rects) {
    const p = t.toView({ x: prev.r_x, y: prev.r_y });
    parts.push(
      `<rect class="prior" x="${fmt(p.x)}" y="${fmt(p.y)}" ` +
        `width="${fmt(prev.r_w * t.scale)}" height="${fmt(prev.r_h * t.scale)}" ` +
        `fill="#8a857a" fill-opacity="0.12" stroke="#8a857a" ` +
        `stroke-width="1.5" stroke-dasharray="6 4"/>`,
    );
  }

  // candidate markers: confidence sets radius and opacity
  for (const m of win.candidate_markers) {
    const v = t.toView({ x: m.px, y: m.py });
    const r = 4 + 6 * m.confidence;
    parts.push(
      `<circle class="marker" cx="${fmt(v.x)}" cy="${fmt(v.y)}" r="${fmt(r)}" ` +
        `fill="#3a6ea5" fill-opacity="${fmt(0.25 + 0.55 * m.confidence)}" ` +
        `stroke="#28507c" stroke-width="1">` +
        `<title>confidence ${m.confidence.toFixed(3)}</title></circle>`,
    );
  }

  // the user's clicks: crosshairs
  for (const c of clicks) {
    const v = t.toView({ x: c.px, y: c.py });
    const s = 7;
    parts.push(
      `<g class="click" stroke="#c4442a" stroke-width="2">` +
        `<line x1="${fmt(v.x - s)}" y1="${fmt(v.y)}" x2="${fmt(v.x + s)}" y2="${fmt(v.y)}"/>` +
        `<line x1="${fmt(v.x)}" y1="${fmt(v.y - s)}" x2="${fmt(v.x)}" y2="${fmt(v.y + s)}"/>` +
        `<circle cx="${fmt(v.x)}" cy="${fmt(v.y)}" r="4" fill="none"/></g>`,
    );
  }

  parts.push("</svg>");
  return parts.join("");
}

/** Recall-versus-iteration curve; y axis spans [0, 1]. */
export function renderCurveSvg(
  rows: MetricRow[],
  width: number,
  height: number,
): string {
  const padL = 34;
  const padB = 22;
  const padT = 8;
  const padR = 10;
  const plotW = width - padL - padR;
  const plotH = height - padT - padB;
  const maxIter = Math.max(1, ...rows.map((r) => r.iteration));
  const x = (iter: number) => padL + (plotW * iter) / maxIter;
  const y = (recall: number) => padT + plotH * (1 - recall);

  const parts: string[] = [];
  parts.push(
    `<svg xmlns="http://www.w3.org/2000/svg" width="${width}" height="${height}" ` +
      `viewBox="0 0 ${width} ${height}" class="curve">`,
  );
  parts.push(
    `<line x1="${padL}" y1="${padT}" x2="${padL}" y2="${padT + plotH}" stroke="#8a857a"/>`,
    `<line x1="${padL}" y1="${padT + plotH}" x2="${padL + plotW}" y2="${padT + plotH}" stroke="#8a857a"/>`,
    `<text x="4" y="${padT + 10}" font-size="10" fill="#49443b">1.0</text>`,
    `<text x="4" y="${padT + plotH}" font-size="10" fill="#49443b">0.0</text>`,
    `<text x="${padL + plotW - 8}" y="${height - 6}" font-size="10" fill="#49443b">${maxIter}</text>`,
  );
  if (rows.length > 0) {
    const pts = [`${fmt(x(0))},${fmt(y(0))}`];
    for (const r of rows) pts.push(`${fmt(x(r.iteration))},${fmt(y(r.recall))}`);
    parts.push(
      `<polyline points="${pts.join(" ")}" fill="none" stroke="#3a6ea5" stroke-width="2"/>`,
    );
    for (const r of rows) {
      parts.push(
        `<circle cx="${fmt(x(r.iteration))}" cy="${fmt(y(r.recall))}" r="3" fill="#3a6ea5">` +
          `<title>iteration ${r.iteration}: recall ${r.recall.toFixed(3)}</title></circle>`,
      );
    }
  }
  parts.push("</svg>");
  return parts.join("");
}

/** One-line status summary shown above the canvas. */
export function statusLine(win: WindowPayload | null, found: number): string {
  if (win === null) return `found ${found}`;
  return (
    `iteration ${win.iteration}, query ${win.query_index} — ` +
    `image ${win.image_id}, window ${win.window_id} — found ${found}`
  );
}

export { type Point };
