/** Intersection-over-union between two binary masks of equal length. */
export function iou(a: Uint8Array, b: Uint8Array): number {
  if (a.length !== b.length) {
    throw new Error(`mask length mismatch: ${a.length} vs ${b.length}`);
  }
  let intersection = 0;
  let union = 0;
  for (let i = 0; i < a.length; i += 1) {
    const av = a[i] !== 0;
    const bv = b[i] !== 0;
    if (av && bv) intersection += 1;
    if (av || bv) union += 1;
  }
  return union === 0 ? 1.0 : intersection / union;
}
