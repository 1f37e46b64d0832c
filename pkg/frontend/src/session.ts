// Session state machine for the two-alternative forced choice flow.
// One reconstruction is visible at a time next to the original; the
// flip key toggles which one. Submissions are guarded so a task id can
// never be sent twice, and a choice made during a network outage is
// retained and retried rather than dropped.

import { ServiceClient, TaskPayload } from './api.js'

export type Side = 1 | 2

export interface SessionEvents {
  onTask?: (task: TaskPayload) => void
  onFlip?: (visible: Side) => void
  onSubmitted?: (count: number) => void
  onError?: (message: string) => void
}

const RETRY_BASE_MS = 500
const RETRY_MAX_MS = 8000

export class Session {
  visible: Side = 1
  task: TaskPayload | null = null
  completed = 0
  private submittedIds = new Set<string>()
  private pendingChoice: Side | null = null

  constructor(
    private client: ServiceClient,
    public raterId: string,
    private events: SessionEvents = {},
    private sleep: (ms: number) => Promise<void> = (ms) => new Promise((r) => setTimeout(r, ms)),
  ) {}

  async start(): Promise<void> {
    await this.advance()
  }

  flip(): Side {
    this.visible = this.visible === 1 ? 2 : 1
    this.events.onFlip?.(this.visible)
    return this.visible
  }

  /** Submit the given side for the current task, then fetch the next one. */
  async choose(side: Side): Promise<void> {
    if (!this.task || this.pendingChoice !== null) return
    const task = this.task
    if (this.submittedIds.has(task.task_id)) return
    this.pendingChoice = side
    let delay = RETRY_BASE_MS
    for (;;) {
      try {
        const count = await this.client.submitRating(task.task_id, side, this.raterId)
        this.submittedIds.add(task.task_id)
        this.completed += 1
        this.pendingChoice = null
        this.events.onSubmitted?.(count)
        break
      } catch (err) {
        this.events.onError?.(`submit failed, retrying: ${err}`)
        await this.sleep(delay)
        delay = Math.min(delay * 2, RETRY_MAX_MS)
      }
    }
    await this.advance()
  }

  private async advance(): Promise<void> {
    let delay = RETRY_BASE_MS
    for (;;) {
      try {
        this.task = await this.client.nextTask()
        this.visible = 1
        this.events.onTask?.(this.task)
        return
      } catch (err) {
        this.events.onError?.(`task fetch failed, retrying: ${err}`)
        await this.sleep(delay)
        delay = Math.min(delay * 2, RETRY_MAX_MS)
      }
    }
  }
}
