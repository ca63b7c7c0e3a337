// Pure pixel transforms producing RGBA buffers for canvas display.
// Red marks positive difference values, blue negative; values inside the
// display threshold band are fully transparent.

import { RawImage, channelPlane, meanPlane } from "./decode.js";

export const DIFF_SATURATION = 0.25; // |diff| mapped to full opacity

export function grayRGBA(img: RawImage): Uint8ClampedArray {
  const plane = img.channels > 1 ? channelPlane(img, 0) : img.data;
  const out = new Uint8ClampedArray(plane.length * 4);
  for (let p = 0; p < plane.length; p++) {
    const v = Math.max(0, Math.min(1, plane[p]!)) * 255;
    out[4 * p] = v;
    out[4 * p + 1] = v;
    out[4 * p + 2] = v;
    out[4 * p + 3] = 255;
  }
  return out;
}

/** Warm overlay for the dose map: transparent at 0, orange at 1. */
export function doseRGBA(img: RawImage): Uint8ClampedArray {
  const plane = img.channels > 1 ? channelPlane(img, 0) : img.data;
  const out = new Uint8ClampedArray(plane.length * 4);
  for (let p = 0; p < plane.length; p++) {
    const v = Math.max(0, Math.min(1, plane[p]!));
    out[4 * p] = 255;
    out[4 * p + 1] = 140;
    out[4 * p + 2] = 0;
    out[4 * p + 3] = Math.round(200 * v);
  }
  return out;
}

/**
 * Signed difference heatmap: red positive, blue negative, transparent inside
 * the threshold band. Display-only; the input stays untouched.
 */
export function diffRGBA(diff: RawImage, threshold: number): Uint8ClampedArray {
  const plane = diff.channels > 1 ? meanPlane(diff) : diff.data;
  const out = new Uint8ClampedArray(plane.length * 4);
  for (let p = 0; p < plane.length; p++) {
    const d = plane[p]!;
    if (Math.abs(d) < threshold) continue; // alpha stays 0
    const strength = Math.min(1, Math.abs(d) / DIFF_SATURATION);
    out[4 * p] = d > 0 ? 255 : 0;
    out[4 * p + 2] = d < 0 ? 255 : 0;
    out[4 * p + 3] = Math.round(255 * strength);
  }
  return out;
}

export function isFullyTransparent(rgba: Uint8ClampedArray): boolean {
  for (let i = 3; i < rgba.length; i += 4) {
    if (rgba[i] !== 0) return false;
  }
  return true;
}

/** Draw an RGBA buffer onto a canvas; no-op without a 2D context (tests). */
export function paint(
  canvas: HTMLCanvasElement,
  rgba: Uint8ClampedArray,
  width: number,
  height: number,
): void {
  canvas.width = width;
  canvas.height = height;
  canvas.dataset.nonzero = String(!isFullyTransparent(rgba));
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  ctx.putImageData(
    new ImageData(rgba as Uint8ClampedArray<ArrayBuffer>, width, height), 0, 0);
}
