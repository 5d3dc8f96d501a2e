/**
 * Browser entry point: wires the canvas, click handling, undo, optional
 * ground-truth IoU panel, and zoom/pan to the session API. Requests are
 * serialized — at most one click request is in flight at a time.
 */

import { ApiClient, ApiRequestError, type Polarity } from './api.js';
import { canvasToImage, identityView, imageToCanvas, panBy, zoomAt, IMAGE_SIZE, type ViewTransform } from './coords.js';
import { maskToRgba, heatmapToRgba, clickMarkers } from './overlay.js';
import { SessionView } from './state.js';

interface Elements {
  canvas: HTMLCanvasElement;
  imageInput: HTMLInputElement;
  gtInput: HTMLInputElement;
  undoButton: HTMLButtonElement;
  heatToggle: HTMLInputElement;
  status: HTMLElement;
  iouPanel: HTMLElement;
}

function requireElement<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (el === null) {
    throw new Error(`missing element #${id}`);
  }
  return el as T;
}

async function decodeImageBitmap(blob: Blob): Promise<ImageBitmap> {
  return createImageBitmap(blob);
}

/** Decode a PNG blob into a binary mask (any non-black pixel is foreground). */
async function blobToBinaryMask(blob: Blob): Promise<Uint8Array> {
  const bitmap = await decodeImageBitmap(blob);
  const off = new OffscreenCanvas(bitmap.width, bitmap.height);
  const ctx = off.getContext('2d');
  if (ctx === null) {
    throw new Error('could not create 2d context');
  }
  ctx.drawImage(bitmap, 0, 0);
  const data = ctx.getImageData(0, 0, bitmap.width, bitmap.height).data;
  const mask = new Uint8Array(bitmap.width * bitmap.height);
  for (let i = 0; i < mask.length; i += 1) {
    mask[i] = data[i * 4] > 127 ? 1 : 0;
  }
  return mask;
}

class App {
  private readonly api: ApiClient;
  private readonly els: Elements;
  private view: ViewTransform = { ...identityView };
  private session: SessionView | null = null;
  private image: ImageBitmap | null = null;
  private busy = false;
  private panAnchor: { x: number; y: number } | null = null;

  constructor(api: ApiClient, els: Elements) {
    this.api = api;
    this.els = els;
    els.imageInput.addEventListener('change', () => void this.onImageChosen());
    els.gtInput.addEventListener('change', () => void this.onGtChosen());
    els.undoButton.addEventListener('click', () => void this.onUndo());
    els.heatToggle.addEventListener('change', () => this.render());
    els.canvas.addEventListener('contextmenu', (e) => e.preventDefault());
    els.canvas.addEventListener('mousedown', (e) => this.onMouseDown(e));
    els.canvas.addEventListener('mousemove', (e) => this.onMouseMove(e));
    window.addEventListener('mouseup', () => {
      this.panAnchor = null;
    });
    els.canvas.addEventListener('wheel', (e) => this.onWheel(e), { passive: false });
    this.syncControls();
  }

  private setStatus(text: string): void {
    this.els.status.textContent = text;
  }

  private syncControls(): void {
    this.els.undoButton.disabled = this.busy || this.session === null || !this.session.canUndo;
  }

  private async onImageChosen(): Promise<void> {
    const file = this.els.imageInput.files?.[0];
    if (!file) {
      return;
    }
    this.setStatus('uploading image…');
    try {
      const id = await this.api.createSession(file);
      this.session = new SessionView(id);
      this.image = await decodeImageBitmap(file);
      this.view = { ...identityView };
      this.setStatus(`session ${id}: click to segment (left = foreground, right = background)`);
    } catch (err) {
      this.setStatus(this.describeError(err));
    }
    this.syncControls();
    this.render();
  }

  private async onGtChosen(): Promise<void> {
    const file = this.els.gtInput.files?.[0];
    if (!file || this.session === null) {
      return;
    }
    try {
      const mask = await blobToBinaryMask(file);
      this.session.loadGroundTruth(mask, IMAGE_SIZE, IMAGE_SIZE);
      this.renderIouPanel();
    } catch (err) {
      this.setStatus(this.describeError(err));
    }
  }

  private onMouseDown(event: MouseEvent): void {
    if (event.button === 1 || event.shiftKey) {
      this.panAnchor = { x: event.offsetX, y: event.offsetY };
      event.preventDefault();
      return;
    }
    if (event.button === 0 || event.button === 2) {
      const polarity: Polarity = event.button === 2 || event.ctrlKey ? 'negative' : 'positive';
      void this.onClick(event.offsetX, event.offsetY, polarity);
    }
  }

  private onMouseMove(event: MouseEvent): void {
    if (this.panAnchor !== null) {
      this.view = panBy(this.view, event.offsetX - this.panAnchor.x, event.offsetY - this.panAnchor.y);
      this.panAnchor = { x: event.offsetX, y: event.offsetY };
      this.render();
    }
  }

  private onWheel(event: WheelEvent): void {
    event.preventDefault();
    const factor = event.deltaY < 0 ? 1.25 : 0.8;
    this.view = zoomAt(this.view, event.offsetX, event.offsetY, factor);
    this.render();
  }

  private async onClick(canvasX: number, canvasY: number, polarity: Polarity): Promise<void> {
    if (this.session === null || this.busy) {
      return;
    }
    const point = canvasToImage(canvasX, canvasY, this.view);
    if (point === null) {
      return;
    }
    this.busy = true;
    this.syncControls();
    this.setStatus(`running ${polarity} click at (${point.x}, ${point.y})…`);
    try {
      const response = await this.api.addClick(this.session.sessionId, point.x, point.y, polarity);
      this.session.applyClick(
        { x: point.x, y: point.y, polarity, index: response.click_index },
        response,
      );
      this.setStatus(
        `click ${response.click_index}: local refinement ${response.selector}, ${response.total_ms.toFixed(0)} ms`,
      );
    } catch (err) {
      this.setStatus(this.describeError(err));
    }
    this.busy = false;
    this.syncControls();
    this.render();
  }

  private async onUndo(): Promise<void> {
    if (this.session === null || this.busy) {
      return;
    }
    this.busy = true;
    this.syncControls();
    try {
      const snapshot = await this.api.undo(this.session.sessionId);
      this.session.applyServerState(snapshot);
      this.setStatus(`undo: ${snapshot.clicks.length} clicks remain`);
    } catch (err) {
      this.setStatus(this.describeError(err));
    }
    this.busy = false;
    this.syncControls();
    this.render();
  }

  private describeError(err: unknown): string {
    if (err instanceof ApiRequestError) {
      return `server error ${err.status} (${err.code}): ${err.message}`;
    }
    return `error: ${String(err)}`;
  }

  private render(): void {
    const ctx = this.els.canvas.getContext('2d');
    if (ctx === null) {
      return;
    }
    ctx.setTransform(1, 0, 0, 1, 0, 0);
    ctx.clearRect(0, 0, this.els.canvas.width, this.els.canvas.height);
    if (this.image === null || this.session === null) {
      return;
    }
    ctx.imageSmoothingEnabled = this.view.scale < 2;
    ctx.setTransform(this.view.scale, 0, 0, this.view.scale, this.view.offsetX, this.view.offsetY);
    ctx.drawImage(this.image, 0, 0, IMAGE_SIZE, IMAGE_SIZE);

    const overlay = this.session.overlayState();
    if (overlay.mask !== null) {
      const rgba = maskToRgba(overlay.mask, overlay.maskHeight, overlay.maskWidth);
      void this.drawLayer(ctx, rgba, overlay.maskWidth, overlay.maskHeight);
    }
    if (this.els.heatToggle.checked && overlay.heatmapPngB64 !== null) {
      void this.drawHeatmap(ctx, overlay.heatmapPngB64);
    }

    ctx.setTransform(1, 0, 0, 1, 0, 0);
    for (const marker of clickMarkers(overlay.markers)) {
      const p = imageToCanvas(marker.x, marker.y, this.view);
      ctx.beginPath();
      ctx.arc(p.x, p.y, 5, 0, 2 * Math.PI);
      ctx.fillStyle = `rgba(${marker.color.r}, ${marker.color.g}, ${marker.color.b}, 1)`;
      ctx.fill();
      ctx.strokeStyle = 'white';
      ctx.stroke();
    }
    this.renderIouPanel();
  }

  private async drawLayer(
    ctx: CanvasRenderingContext2D,
    rgba: Uint8ClampedArray,
    width: number,
    height: number,
  ): Promise<void> {
    const pixels = rgba as Uint8ClampedArray<ArrayBuffer>;
    const bitmap = await createImageBitmap(new ImageData(pixels, width, height));
    ctx.drawImage(bitmap, 0, 0, IMAGE_SIZE, IMAGE_SIZE);
  }

  private async drawHeatmap(ctx: CanvasRenderingContext2D, pngB64: string): Promise<void> {
    const binary = atob(pngB64);
    const bytes = new Uint8Array(binary.length);
    for (let i = 0; i < binary.length; i += 1) {
      bytes[i] = binary.charCodeAt(i);
    }
    const bitmap = await decodeImageBitmap(new Blob([bytes], { type: 'image/png' }));
    const off = new OffscreenCanvas(bitmap.width, bitmap.height);
    const offCtx = off.getContext('2d');
    if (offCtx === null) {
      return;
    }
    offCtx.drawImage(bitmap, 0, 0);
    const data = offCtx.getImageData(0, 0, bitmap.width, bitmap.height).data;
    const gray = new Uint8Array(bitmap.width * bitmap.height);
    for (let i = 0; i < gray.length; i += 1) {
      gray[i] = data[i * 4];
    }
    const rgba = heatmapToRgba(gray, bitmap.height, bitmap.width);
    await this.drawLayer(ctx, rgba, bitmap.width, bitmap.height);
  }

  private renderIouPanel(): void {
    if (this.session === null) {
      this.els.iouPanel.textContent = '';
      return;
    }
    const series = this.session.iouSeries;
    if (series.length === 0) {
      this.els.iouPanel.textContent = 'load a ground-truth mask to track IoU';
      return;
    }
    this.els.iouPanel.textContent = series
      .map((p) => `click ${p.clickIndex}: IoU ${p.value.toFixed(4)}`)
      .join('\n');
  }
}

export function startApp(baseUrl = ''): App {
  const els: Elements = {
    canvas: requireElement<HTMLCanvasElement>('canvas'),
    imageInput: requireElement<HTMLInputElement>('image-input'),
    gtInput: requireElement<HTMLInputElement>('gt-input'),
    undoButton: requireElement<HTMLButtonElement>('undo-button'),
    heatToggle: requireElement<HTMLInputElement>('heat-toggle'),
    status: requireElement<HTMLElement>('status'),
    iouPanel: requireElement<HTMLElement>('iou-panel'),
  };
  return new App(new ApiClient(baseUrl), els);
}

if (typeof document !== 'undefined' && document.getElementById('canvas') !== null) {
  startApp();
}
