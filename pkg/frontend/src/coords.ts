/**
 * Canvas <-> image coordinate mapping under zoom and pan. The view transform
 * places image pixel (0, 0) at canvas (offsetX, offsetY) and scales uniformly.
 */

export const IMAGE_SIZE = 1024;

export interface ViewTransform {
  scale: number;
  offsetX: number;
  offsetY: number;
}

export const identityView: ViewTransform = { scale: 1, offsetX: 0, offsetY: 0 };

export interface ImagePoint {
  x: number;
  y: number;
}

export function canvasToImage(
  canvasX: number,
  canvasY: number,
  view: ViewTransform,
): ImagePoint | null {
  if (view.scale <= 0) {
    throw new Error(`scale must be positive, got ${view.scale}`);
  }
  const x = Math.floor((canvasX - view.offsetX) / view.scale);
  const y = Math.floor((canvasY - view.offsetY) / view.scale);
  if (x < 0 || y < 0 || x >= IMAGE_SIZE || y >= IMAGE_SIZE) {
    return null;
  }
  return { x, y };
}

export function imageToCanvas(x: number, y: number, view: ViewTransform): { x: number; y: number } {
  // center of the image pixel in canvas space
  return {
    x: view.offsetX + (x + 0.5) * view.scale,
    y: view.offsetY + (y + 0.5) * view.scale,
  };
}

export function zoomAt(
  view: ViewTransform,
  canvasX: number,
  canvasY: number,
  factor: number,
): ViewTransform {
  // keep the image point under the cursor fixed while scaling
  const scale = view.scale * factor;
  return {
    scale,
    offsetX: canvasX - (canvasX - view.offsetX) * factor,
    offsetY: canvasY - (canvasY - view.offsetY) * factor,
  };
}

export function panBy(view: ViewTransform, dx: number, dy: number): ViewTransform {
  return { ...view, offsetX: view.offsetX + dx, offsetY: view.offsetY + dy };
}
