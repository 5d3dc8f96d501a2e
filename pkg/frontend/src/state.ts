/**
 * Client-side session view model. The server snapshot is the source of truth:
 * the overlay is always derived from the last server response, and the whole
 * view is reconstructible from a get_state payload (e.g. after page reload).
 */

import type { ClickEntry, ClickResponse, SessionState } from './api.js';
import { decodeRleMask } from './rle.js';
import { iou } from './iou.js';

export interface OverlayState {
  mask: Uint8Array | null;
  maskHeight: number;
  maskWidth: number;
  heatmapPngB64: string | null;
  selector: 'run' | 'skip' | null;
  markers: ClickEntry[];
  latencyMs: number | null;
}

export interface IouPoint {
  clickIndex: number;
  value: number;
}

export class SessionView {
  private state: SessionState;
  private gt: Uint8Array | null = null;
  private series: IouPoint[] = [];

  constructor(sessionId: string) {
    this.state = { id: sessionId, clicks: [], last_response: null };
  }

  get sessionId(): string {
    return this.state.id;
  }

  get clicks(): ClickEntry[] {
    return this.state.clicks;
  }

  get canUndo(): boolean {
    return this.state.clicks.length > 0;
  }

  get iouSeries(): IouPoint[] {
    return this.series;
  }

  loadGroundTruth(mask: Uint8Array, height: number, width: number): void {
    const response = this.state.last_response;
    if (response && (response.mask_rle.height !== height || response.mask_rle.width !== width)) {
      throw new Error(
        `ground truth is ${height}x${width}, mask is ${response.mask_rle.height}x${response.mask_rle.width}`,
      );
    }
    this.gt = mask;
    this.series = [];
    this.appendIouPoint();
  }

  applyClick(entry: ClickEntry, response: ClickResponse): void {
    this.state.clicks = [...this.state.clicks, entry];
    this.state.last_response = response;
    this.appendIouPoint();
  }

  /** Replace the whole view with a server snapshot (undo or page reload). */
  applyServerState(snapshot: SessionState): void {
    this.state = snapshot;
    this.series = this.series.filter((p) => p.clickIndex <= snapshot.clicks.length);
    if (this.series.length === 0) {
      this.appendIouPoint();
    }
  }

  overlayState(): OverlayState {
    const response = this.state.last_response;
    return {
      mask: response ? decodeRleMask(response.mask_rle) : null,
      maskHeight: response ? response.mask_rle.height : 0,
      maskWidth: response ? response.mask_rle.width : 0,
      heatmapPngB64: response ? response.error_heatmap_png_b64 : null,
      selector: response ? response.selector : null,
      markers: [...this.state.clicks].sort((a, b) => a.index - b.index),
      latencyMs: response ? response.total_ms : null,
    };
  }

  private appendIouPoint(): void {
    const response = this.state.last_response;
    if (this.gt === null || response === null) {
      return;
    }
    const mask = decodeRleMask(response.mask_rle);
    this.series.push({ clickIndex: this.state.clicks.length, value: iou(mask, this.gt) });
  }
}
