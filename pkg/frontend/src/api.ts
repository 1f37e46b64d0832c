// Thin typed client for the rating service. The service never reveals
// which method produced a crop; payloads only carry opaque crop ids.

export interface TaskPayload {
  task_id: string
  original: string
  side1: string
  side2: string
  nonce: number
}

export interface ScoreRow {
  arm: string
  label: string
  bpp: number
  elo: number
  count: number
  p99: [number, number] | null
}

export interface ScoresPayload {
  arms: ScoreRow[]
  golden_accuracy: Record<string, { asked: number; correct: number; accuracy: number }>
  ratings_total: number
}

export class ServiceClient {
  constructor(private baseUrl: string, private fetchFn: typeof fetch = fetch) {}

  cropUrl(id: string): string {
    return `${this.baseUrl}/crop/${id}`
  }

  async nextTask(): Promise<TaskPayload> {
    const r = await this.fetchFn(`${this.baseUrl}/task`)
    if (!r.ok) throw new Error(`task request failed: ${r.status}`)
    return (await r.json()) as TaskPayload
  }

  async submitRating(taskId: string, chosen: 1 | 2, rater: string): Promise<number> {
    const r = await this.fetchFn(`${this.baseUrl}/rating`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({ task_id: taskId, chosen, rater }),
    })
    if (!r.ok) throw new Error(`rating rejected: ${r.status}`)
    const body = (await r.json()) as { recorded: number }
    return body.recorded
  }

  async scores(): Promise<ScoresPayload> {
    const r = await this.fetchFn(`${this.baseUrl}/scores`)
    if (!r.ok) throw new Error(`scores request failed: ${r.status}`)
    return (await r.json()) as ScoresPayload
  }
}
