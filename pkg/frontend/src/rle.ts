/**
 * Run-length mask codec matching the server wire format: row-major runs that
 * alternate starting with background, with a leading zero-length run when the
 * first pixel is foreground.
 */

export interface RleMask {
  height: number;
  width: number;
  counts: number[];
}

export function decodeRleMask(rle: RleMask): Uint8Array {
  const total = rle.height * rle.width;
  const out = new Uint8Array(total);
  let pos = 0;
  let value = 0;
  for (const count of rle.counts) {
    if (count < 0) {
      throw new Error(`negative run length ${count}`);
    }
    if (value === 1) {
      out.fill(1, pos, pos + count);
    }
    pos += count;
    value = 1 - value;
  }
  if (pos !== total) {
    throw new Error(`RLE covers ${pos} pixels, expected ${total}`);
  }
  return out;
}

export function encodeRleMask(mask: Uint8Array, height: number, width: number): RleMask {
  if (mask.length !== height * width) {
    throw new Error(`mask has ${mask.length} pixels, expected ${height * width}`);
  }
  const counts: number[] = [];
  if (mask.length === 0) {
    return { height, width, counts };
  }
  if (mask[0] !== 0) {
    counts.push(0);
  }
  let current = mask[0];
  let run = 1;
  for (let i = 1; i < mask.length; i += 1) {
    const value = mask[i];
    if (value === current) {
      run += 1;
    } else {
      counts.push(run);
      current = value;
      run = 1;
    }
  }
  counts.push(run);
  return { height, width, counts };
}
