/**
 * Mapping between image pixel space and view (screen) space.
 *
 * The queried window rectangle is scaled uniformly to fit the viewport and
 * centered. `toImage` is the exact inverse of `toView`, so click positions
 * recorded in view pixels land on the image pixel the user pointed at; the
 * tests hold the round trip to within one pixel at arbitrary zoom.
 */

import type { Rect } from "./api.js";

export interface Point {
  x: number;
  y: number;
}

export class ViewTransform {
  constructor(
    readonly scale: number,
    readonly offsetX: number,
    readonly offsetY: number,
    readonly rect: Rect,
  ) {
    if (!(scale > 0)) throw new Error(`scale must be positive, got ${scale}`);
  }

  /** Image pixel coordinates to view coordinates. */
  toView(p: Point): Point {
    return {
      x: (p.x - this.rect.r_x) * this.scale + this.offsetX,
      y: (p.y - this.rect.r_y) * this.scale + this.offsetY,
    };
  }

  /** View coordinates back to image pixel coordinates. */
  toImage(p: Point): Point {
    return {
      x: (p.x - this.offsetX) / this.scale + this.rect.r_x,
      y: (p.y - this.offsetY) / this.scale + this.rect.r_y,
    };
  }
}

/** Uniform-scale transform that fits `rect` into a viewport, centered. */
export function fitRect(
  rect: Rect,
  viewW: number,
  viewH: number,
  margin = 0,
): ViewTransform {
  if (rect.r_w <= 0 || rect.r_h <= 0) {
    throw new Error(`degenerate window rect ${JSON.stringify(rect)}`);
  }
  const innerW = viewW - 2 * margin;
  const innerH = viewH - 2 * margin;
  if (innerW <= 0 || innerH <= 0) {
    throw new Error(`viewport ${viewW}x${viewH} leaves no room at margin ${margin}`);
  }
  const scale = Math.min(innerW / rect.r_w, innerH / rect.r_h);
  const offsetX = (viewW - rect.r_w * scale) / 2;
  const offsetY = (viewH - rect.r_h * scale) / 2;
  return new ViewTransform(scale, offsetX, offsetY, rect);
}

/** Inclusive containment, matching the server's window bounds check. */
export function rectContains(rect: Rect, p: Point): boolean {
  return (
    p.x >= rect.r_x &&
    p.x <= rect.r_x + rect.r_w &&
    p.y >= rect.r_y &&
    p.y <= rect.r_y + rect.r_h
  );
}

/** Nearest point of `rect` to `p` (identity when already inside). */
export function clampToRect(rect: Rect, p: Point): Point {
  return {
    x: Math.min(Math.max(p.x, rect.r_x), rect.r_x + rect.r_w),
    y: Math.min(Math.max(p.y, rect.r_y), rect.r_y + rect.r_h),
  };
}
