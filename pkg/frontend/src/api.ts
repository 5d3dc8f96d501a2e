/**
 * Typed client for the segmentation session API. All responses are validated
 * with zod before use; the server is the single source of truth for session
 * state.
 */

import { z } from 'zod';

export const RleSchema = z.object({
  height: z.number().int().nonnegative(),
  width: z.number().int().nonnegative(),
  counts: z.array(z.number().int().nonnegative()),
});

export const ClickResponseSchema = z.object({
  mask_rle: RleSchema,
  error_heatmap_png_b64: z.string(),
  selector: z.enum(['run', 'skip']),
  timings_ms: z.record(z.string(), z.number()),
  total_ms: z.number(),
  click_index: z.number().int().positive(),
});

export const ClickEntrySchema = z.object({
  x: z.number().int(),
  y: z.number().int(),
  polarity: z.enum(['positive', 'negative']),
  index: z.number().int().positive(),
});

export const SessionStateSchema = z.object({
  id: z.string(),
  clicks: z.array(ClickEntrySchema),
  last_response: ClickResponseSchema.nullable(),
});

export const HealthSchema = z.object({
  status: z.string(),
  version: z.string(),
  checkpoint_hash: z.string(),
});

export const ApiErrorSchema = z.object({
  code: z.string(),
  message: z.string(),
});

export type ClickResponse = z.infer<typeof ClickResponseSchema>;
export type ClickEntry = z.infer<typeof ClickEntrySchema>;
export type SessionState = z.infer<typeof SessionStateSchema>;
export type Polarity = ClickEntry['polarity'];

export class ApiRequestError extends Error {
  constructor(
    public readonly status: number,
    public readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

async function parseBody<T>(response: Response, schema: z.ZodType<T>): Promise<T> {
  const body = await response.json();
  if (!response.ok) {
    const err = ApiErrorSchema.safeParse(body);
    if (err.success) {
      throw new ApiRequestError(response.status, err.data.code, err.data.message);
    }
    throw new ApiRequestError(response.status, 'unknown_error', JSON.stringify(body));
  }
  return schema.parse(body);
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string = '',
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  async health() {
    const response = await this.fetchFn(`${this.baseUrl}/v1/health`);
    return parseBody(response, HealthSchema);
  }

  async createSession(image: Blob): Promise<string> {
    const form = new FormData();
    form.append('image', image, 'image.png');
    const response = await this.fetchFn(`${this.baseUrl}/v1/sessions`, {
      method: 'POST',
      body: form,
    });
    const body = await parseBody(response, z.object({ id: z.string() }));
    return body.id;
  }

  async addClick(sessionId: string, x: number, y: number, polarity: Polarity): Promise<ClickResponse> {
    const response = await this.fetchFn(`${this.baseUrl}/v1/sessions/${sessionId}/clicks`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ x, y, polarity }),
    });
    return parseBody(response, ClickResponseSchema);
  }

  async undo(sessionId: string): Promise<SessionState> {
    const response = await this.fetchFn(`${this.baseUrl}/v1/sessions/${sessionId}/undo`, {
      method: 'POST',
    });
    return parseBody(response, SessionStateSchema);
  }

  async getState(sessionId: string): Promise<SessionState> {
    const response = await this.fetchFn(`${this.baseUrl}/v1/sessions/${sessionId}`);
    return parseBody(response, SessionStateSchema);
  }
}
