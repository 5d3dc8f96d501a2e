/**
 * Pure overlay rendering: RGBA buffers for the mask and error-heatmap layers
 * and ordered click markers. Everything here is derived from the last server
 * response — no segmentation logic lives client-side.
 */

import type { ClickEntry } from './api.js';

export interface Rgba {
  r: number;
  g: number;
  b: number;
  a: number;
}

export const MASK_COLOR: Rgba = { r: 64, g: 160, b: 255, a: 110 };
export const HEAT_COLOR: Rgba = { r: 255, g: 96, b: 32, a: 160 };
export const POSITIVE_MARKER: Rgba = { r: 32, g: 200, b: 64, a: 255 };
export const NEGATIVE_MARKER: Rgba = { r: 220, g: 48, b: 48, a: 255 };

export function maskToRgba(mask: Uint8Array, height: number, width: number, color: Rgba = MASK_COLOR): Uint8ClampedArray {
  if (mask.length !== height * width) {
    throw new Error(`mask has ${mask.length} pixels, expected ${height * width}`);
  }
  const out = new Uint8ClampedArray(height * width * 4);
  for (let i = 0; i < mask.length; i += 1) {
    if (mask[i] !== 0) {
      const o = i * 4;
      out[o] = color.r;
      out[o + 1] = color.g;
      out[o + 2] = color.b;
      out[o + 3] = color.a;
    }
  }
  return out;
}

export function heatmapToRgba(gray: Uint8Array, height: number, width: number, color: Rgba = HEAT_COLOR): Uint8ClampedArray {
  if (gray.length !== height * width) {
    throw new Error(`heatmap has ${gray.length} pixels, expected ${height * width}`);
  }
  const out = new Uint8ClampedArray(height * width * 4);
  for (let i = 0; i < gray.length; i += 1) {
    const o = i * 4;
    out[o] = color.r;
    out[o + 1] = color.g;
    out[o + 2] = color.b;
    out[o + 3] = Math.round((gray[i] / 255) * color.a);
  }
  return out;
}

export interface Marker {
  x: number;
  y: number;
  index: number;
  color: Rgba;
}

export function clickMarkers(clicks: ClickEntry[]): Marker[] {
  return [...clicks]
    .sort((a, b) => a.index - b.index)
    .map((c) => ({
      x: c.x,
      y: c.y,
      index: c.index,
      color: c.polarity === 'positive' ? POSITIVE_MARKER : NEGATIVE_MARKER,
    }));
}
